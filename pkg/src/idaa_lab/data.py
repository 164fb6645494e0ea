"""Datasets: IDX file pairs and a seeded synthetic shape generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXError(Exception):
    pass


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int64
    n_classes: int
    provenance: str

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.provenance)

    def split(self, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise IDXTruncatedError(f"{path}: truncated header")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise IDXMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need])


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    n, h, w = _read_header(ibuf, IMAGES_MAGIC, 3, images_path)
    (nl,) = _read_header(lbuf, LABELS_MAGIC, 1, labels_path)
    if n != nl:
        raise IDXCountMismatchError(f"{n} images but {nl} labels")
    body = ibuf[16:]
    if len(body) < n * h * w:
        raise IDXTruncatedError(f"{images_path}: expected {n * h * w} pixel bytes, found {len(body)}")
    if len(lbuf) - 8 < n:
        raise IDXTruncatedError(f"{labels_path}: expected {n} label bytes, found {len(lbuf) - 8}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=n * h * w).reshape(n, 1, h, w)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    k = n_classes if n_classes is not None else max(2, int(labels.max()) + 1 if n else 2)
    return Dataset(pixels / 255.0, labels, k, "idx-file")


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels quantised to u8)."""
    if dataset.images.shape[1] != 1:
        raise ValueError("IDX stores single-channel images only")
    n, _, h, w = dataset.images.shape
    pixels = np.round(dataset.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2I", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def _templates(size: int) -> list[np.ndarray]:
    c = (size - 1) / 2
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = ii - c, jj - c
    r = np.hypot(dy, dx)
    half = size * 0.3
    t = max(1.0, size / 14)  # stroke half-width
    inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)

    def f(mask):
        return mask.astype(np.float64)

    return [
        f((np.abs(dy) <= t) & (np.abs(dx) <= half)),  # horizontal bar
        f((np.abs(dx) <= t) & (np.abs(dy) <= half)),  # vertical bar
        f((np.abs(dy - dx) <= t * 1.4) & inside),  # diagonal
        f((np.abs(dy + dx) <= t * 1.4) & inside),  # anti-diagonal
        f(((np.abs(dy) <= t) | (np.abs(dx) <= t)) & inside),  # plus
        f(((np.abs(dy - dx) <= t * 1.4) | (np.abs(dy + dx) <= t * 1.4)) & inside),  # x-cross
        f(r <= half),  # disc
        f(np.abs(r - half) <= t),  # ring
        f(inside & ~((np.abs(dy) < half - 2 * t) & (np.abs(dx) < half - 2 * t))),  # square outline
        f((np.abs(dy) <= t) & (np.abs(dx) <= half) | (np.abs(dy + half * 0.6) <= t) & (np.abs(dx) <= half)),  # two bars
        f((np.abs(dx) <= t) & (np.abs(dy) <= half) | (np.abs(dx + half * 0.6) <= t) & (np.abs(dy) <= half)),  # two columns
        f((r <= half * 0.45)),  # small disc
    ]


N_TEMPLATES = 12
DEFAULT_CONTRAST = 0.1


def templates(n_classes: int, size: int = 28) -> np.ndarray:
    if not 2 <= n_classes <= N_TEMPLATES:
        raise ValueError(f"n_classes must lie in [2, {N_TEMPLATES}]")
    return np.stack(_templates(size)[:n_classes])


def synth_dataset(
    seed: int,
    n_classes: int = 10,
    per_class: int = 100,
    size: int = 28,
    noise: float = 0.05,
    contrast: float = DEFAULT_CONTRAST,
) -> Dataset:
    """One geometric template per class plus seeded Gaussian pixel noise (clipped to [0, 1]).

    Template strokes have intensity ``contrast`` on a zero background.
    """
    base = templates(n_classes, size) * contrast
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), per_class)
    images = base[labels][:, None]
    if noise > 0:
        images = np.clip(images + rng.normal(0.0, noise, size=images.shape), 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], n_classes, f"synthetic-seed:{seed}")
