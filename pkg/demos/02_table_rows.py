# Desk-scale versions of the ER-DAG and loop-graph table rows: 10 seeded
# runs each, mean and sample std of SHD / TPR / FDR.
from scd.experiment import ExperimentConfig, run_experiment

setups = {
    "ER-DAG p=5": {"graph": {"kind": "er_dag", "p": 5}},
    "loop p=5": {"graph": {"kind": "loop", "p": 5}, "drift": {"require_stable": True}},
}
for name, overrides in setups.items():
    res = run_experiment(ExperimentConfig.from_dict(overrides))
    a = res.aggregate
    print(f"{name:12s}", "  ".join(f"{m.upper()} {a.mean(m):.3f} +- {a.std(m):.3f}" for m in ("shd", "tpr", "fdr")))

# the same rows move noticeably with the seed block; try a few
for base in (0, 100, 200):
    a = run_experiment(ExperimentConfig.from_dict({"base_seed": base})).aggregate
    print(f"ER base_seed {base:3d}: TPR {a.mean('tpr'):.3f}  FDR {a.mean('fdr'):.3f}")
