"""Surrogate x target grid for IDAA and the two momentum baselines.

White-box cells sit on the diagonal; everything else measures transfer.
"""
from pathlib import Path

from idaa_lab.bench import ExperimentConfig, run_experiment

OUT = Path(__file__).parent / "out"
models = [str(OUT / f"{a}.advw") for a in ("mlp-2", "cnn-small", "cnn-wide")]

cfg = ExperimentConfig(
    targets=models,
    surrogates=models,
    methods=("idaa", "dim", "mi"),
    samples=40,
    seed=0,
    out=str(OUT / "grid"),
)
report = run_experiment(cfg)
print(report.to_csv())

for method in cfg.methods:
    rows = [r for r in report.rows if r.method == method and not r.white_box]
    print(f"{method:5s} black-box fSuc {sum(r.fsuc for r in rows) / len(rows):.3f}"
          f"  tSuc {sum(r.tsuc for r in rows) / len(rows):.3f}")
