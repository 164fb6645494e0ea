"""One targeted attack, step by step, on a model we can see into."""
from pathlib import Path

import numpy as np

from idaa_lab import AttackConfig, AttackTask, classify, load_weights, run_idaa, synth_dataset

OUT = Path(__file__).parent / "out"
model = load_weights(OUT / "cnn-small.advw")
pool = synth_dataset(1, per_class=30)

x, y = pool.images[0], int(pool.labels[0])
tgt = (y + 3) % pool.n_classes
print("source", y, "target", tgt, "clean prediction", classify(model, x[None])[0])

cfg = AttackConfig()  # eps 0.07, 10 steps, 10 variants, K=3 mixup rounds
out = run_idaa(AttackTask(x, y, tgt, (model,)), cfg, rng=np.random.default_rng(0))

for t, (loss, linf) in enumerate(zip(out.losses, out.linf), 1):
    print(f"step {t:2d}  loss {loss:+.4f}  |r|_inf {linf:.4f}")

print("adversarial prediction", classify(model, out.x_adv[None])[0])
print("stays in the box:", out.x_adv.min() >= 0, out.x_adv.max() <= 1,
      np.abs(out.x_adv - x).max() <= cfg.eps + 1e-12)
