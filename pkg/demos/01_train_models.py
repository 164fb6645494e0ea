"""Train the three toy classifiers used by the other demos.

Run from the repository root:  python demos/01_train_models.py
Weights land in demos/out/*.advw.
"""
from pathlib import Path

import numpy as np

from idaa_lab import ModelSpec, classify, save_weights, synth_dataset, train

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

train_set = synth_dataset(0)
test_set = synth_dataset(1, per_class=30)
print("train", train_set.images.shape, "test", test_set.images.shape)

# faint strokes on black: contrast 0.1 keeps an eps=0.07 budget meaningful
print("pixel range", train_set.images.min(), train_set.images.max())

for arch, seed in [("mlp-2", 1), ("cnn-small", 2), ("cnn-wide", 3)]:
    spec = ModelSpec(arch, train_set.shape, train_set.n_classes)
    w = train(spec, train_set, epochs=20, seed=seed)
    acc = np.mean(classify(w, test_set.images) == test_set.labels)
    print(f"{arch:10s} held-out accuracy {acc:.3f}")
    save_weights(w, OUT / f"{arch}.advw")
