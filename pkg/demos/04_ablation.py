"""Sweep the number of mixup rounds K; K=0 turns local mixup off."""
from pathlib import Path

from idaa_lab.bench import ExperimentConfig, run_ablation

OUT = Path(__file__).parent / "out"
models = [str(OUT / f"{a}.advw") for a in ("mlp-2", "cnn-small", "cnn-wide")]

base = ExperimentConfig(targets=models, surrogates=[models[1]], methods=("idaa",),
                        samples=40, seed=0, out=str(OUT / "ablation"))

for k, report in run_ablation(base, "K", values=[0, 1, 3, 6]):
    bb = [r for r in report.rows if not r.white_box]
    print(f"K={k}  black-box tSuc " + "  ".join(f"{r.target}={r.tsuc:.3f}" for r in bb))
