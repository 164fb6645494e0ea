"""Desk-scale classifiers: definition, training and the ADVW weight container."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numgrad as ng

log = logging.getLogger(__name__)

ARCHITECTURES = ("mlp-2", "cnn-small", "cnn-wide")
MLP_HIDDEN = 64
SMALL_CHANNELS = 8
WIDE_CHANNELS = 16
POOL = 2

MAGIC = b"ADVW"
VERSION = 1
SPEC_KEY = "__spec__"


class WeightFileError(Exception):
    """Base class for ADVW container errors."""


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class SpecMismatchError(WeightFileError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, int, int]
    n_classes: int

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (C, H, W)")
        if self.arch != "mlp-2" and (self.input_shape[1] % 2 or self.input_shape[2] % 2):
            raise ValueError("convolutional architectures need even H and W for 2x2 pooling")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        c, h, w = self.input_shape
        k = self.n_classes
        if self.arch == "mlp-2":
            return {
                "fc1.weight": (MLP_HIDDEN, c * h * w),
                "fc1.bias": (MLP_HIDDEN,),
                "fc2.weight": (k, MLP_HIDDEN),
                "fc2.bias": (k,),
            }
        pooled = (h // POOL) * (w // POOL)
        if self.arch == "cnn-small":
            return {
                "conv1.weight": (SMALL_CHANNELS, c, 3, 3),
                "conv1.bias": (SMALL_CHANNELS,),
                "fc.weight": (k, SMALL_CHANNELS * pooled),
                "fc.bias": (k,),
            }
        return {
            "conv1.weight": (WIDE_CHANNELS, c, 3, 3),
            "conv1.bias": (WIDE_CHANNELS,),
            "conv2.weight": (WIDE_CHANNELS, WIDE_CHANNELS, 3, 3),
            "conv2.bias": (WIDE_CHANNELS,),
            "fc.weight": (k, WIDE_CHANNELS * pooled),
            "fc.bias": (k,),
        }

    def to_json(self) -> str:
        return json.dumps(
            {"arch": self.arch, "input_shape": list(self.input_shape), "n_classes": self.n_classes},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        d = json.loads(text)
        return cls(d["arch"], tuple(d["input_shape"]), int(d["n_classes"]))


@dataclass
class ModelWeights:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    history: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        expected = self.spec.layer_shapes()
        if set(expected) != set(self.tensors):
            raise SpecMismatchError(
                f"layers {sorted(self.tensors)} do not match spec layers {sorted(expected)}"
            )
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise SpecMismatchError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def equals(self, other: ModelWeights) -> bool:
        """Bit-exact comparison."""
        return self.spec == other.spec and all(
            self.tensors[k].dtype == other.tensors[k].dtype
            and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def init_weights(spec: ModelSpec, seed: int) -> ModelWeights:
    """Uniform(-s, s) per tensor, s = 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    shapes = spec.layer_shapes()
    for name, shape in shapes.items():
        wshape = shapes[name.replace(".bias", ".weight")]
        fan_in = int(np.prod(wshape[1:]))
        s = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-s, s, size=shape).astype(np.float32)
    return ModelWeights(spec, tensors)


def forward(weights: ModelWeights, x: ng.Tensor, consts: bool = True) -> ng.Tensor:
    """Record the network on ``x.tape``; weights enter as constants unless ``consts`` is False."""
    tape = x.tape
    spec = weights.spec
    batched = x.ndim == 4
    if tuple(x.shape[-3:]) != spec.input_shape or x.ndim not in (3, 4):
        raise ng.ShapeError("predict", x.shape, spec.input_shape)
    p = {k: (tape.constant(v) if consts else v) for k, v in weights.tensors.items()}
    keep = 1 if batched else 0
    if spec.arch == "mlp-2":
        h = ng.flatten(x, keep)
        h = ng.relu(ng.dense(h, p["fc1.weight"], p["fc1.bias"]))
        return ng.dense(h, p["fc2.weight"], p["fc2.bias"])
    h = ng.relu(ng.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
    if spec.arch == "cnn-wide":
        h = ng.relu(ng.conv2d(h, p["conv2.weight"], p["conv2.bias"]))
    h = ng.flatten(ng.mean_pool(h, POOL), keep)
    return ng.dense(h, p["fc.weight"], p["fc.bias"])


def predict(weights: ModelWeights, image, tape: ng.Tape | None = None):
    """Logits for one image (C,H,W) or a batch (B,C,H,W).

    A Tensor input is recorded on its own tape and a Tensor is returned. A
    plain array is evaluated on a scratch tape (``tape`` if given) and the
    logits come back as an ndarray.
    """
    if isinstance(image, ng.Tensor):
        return forward(weights, image)
    scratch = tape if tape is not None else ng.Tape("f64")
    return forward(weights, scratch.constant(image)).data


def classify(weights: ModelWeights, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Argmax labels; ties resolve to the lowest class index."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch):
        out.append(np.argmax(predict(weights, images[i : i + batch]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(weights: ModelWeights, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(classify(weights, images) == np.asarray(labels)))


def train(
    spec: ModelSpec,
    dataset,
    epochs: int = 20,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 32,
    test=None,
) -> ModelWeights:
    """Plain minibatch gradient descent on mean cross-entropy.

    ``dataset`` and ``test`` are anything with ``images`` (N,C,H,W) and
    ``labels`` (N,) attributes. When ``test`` is omitted, accuracy is only
    reported on the training set. Per-epoch mean loss and final accuracies
    are stored in ``weights.history``.
    """
    images = np.asarray(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.max() >= spec.n_classes or labels.min() < 0:
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    init = init_weights(spec, seed)
    if epochs == 0:
        return init
    rng = np.random.default_rng([seed, 1])
    params = {k: v.astype(np.float64) for k, v in init.tensors.items()}
    names = list(params)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            tape = ng.Tape("f64")
            leaves = {k: tape.leaf(params[k]) for k in names}
            mw = _Live(spec, leaves)
            logits = forward(mw, tape.constant(images[idx]), consts=False)
            loss = ng.softmax_cross_entropy(logits, labels[idx])
            grads = tape.backward(loss, [leaves[k] for k in names])
            for k, g in zip(names, grads):
                params[k] = params[k] - lr * g
            total += float(loss.data) * len(idx)
        losses.append(total / len(images))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    weights = ModelWeights(spec, {k: v.astype(np.float32) for k, v in params.items()})
    weights.history["loss"] = losses
    weights.history["train_acc"] = accuracy(weights, images, labels)
    if test is not None:
        weights.history["test_acc"] = accuracy(weights, test.images, test.labels)
    log.info("trained %s: %s", spec.arch, {k: v for k, v in weights.history.items() if k != "loss"})
    return weights


@dataclass
class _Live:
    """Duck-typed stand-in for ModelWeights whose tensors are tape leaves."""

    spec: ModelSpec
    tensors: dict


# ---------------------------------------------------------------------------
# ADVW container
# ---------------------------------------------------------------------------


def save_weights(weights: ModelWeights, path) -> None:
    spec_bytes = weights.spec.to_json().encode("utf-8")
    entries = [(SPEC_KEY, (len(spec_bytes),), spec_bytes)]
    for name in sorted(weights.tensors):
        arr = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        entries.append((name, arr.shape, arr.tobytes()))
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(entries))
    for name, shape, payload in entries:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        out += payload
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"truncated while reading {what} at byte {self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path) -> ModelWeights:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an ADVW file")
    version = r.u32("version")
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    count = r.u32("tensor count")
    spec = None
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        ndim = r.u32("ndim")
        dims = tuple(r.u32("dims") for _ in range(ndim))
        if name == SPEC_KEY:
            spec = ModelSpec.from_json(r.take(dims[0], "spec payload").decode("utf-8"))
            continue
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n, f"tensor {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if spec is None:
        raise SpecMismatchError(f"{path}: missing {SPEC_KEY} header")
    return ModelWeights(spec, tensors)
