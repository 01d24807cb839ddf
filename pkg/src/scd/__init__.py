"""Causal coupling discovery for linear SDEs with multiplicative noise."""
from .errors import DataQualityError, FormatError, ParameterError, SCDError, StepSizeError
from .graph_model import (AdjacencyPattern, StabilityReport, WeightedDigraph, binarize,
                          check_stability, generate_er_dag, generate_loop_graph, is_acyclic)
from .sde_engine import AffineDrift, SimulationConfig, Trajectory, em_step, residuals, simulate
from .estimator import (DriftFit, EstimatorConfig, FitResult, NodeSolution, beta_min_bound,
                        curvature, fit_all_nodes, fit_drift, kkt_check, lambda_lower_bound,
                        node_gradient, node_objective, soft_threshold, solve_node)
from .metrics import MetricsReport, aggregate, confusion, evaluate, fdr, shd, tpr

__version__ = "0.1.0"
