"""Differentiable image transformations for input diversity.

A :class:`TransformSpec` freezes every random draw at sampling time, so
applying it is a pure function of the image. Geometric kinds are bilinear
warps with zero padding; photometric kinds clamp back into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numgrad as ng

KINDS = (
    "identity",
    "hflip",
    "resize-pad",
    "rotate",
    "translate",
    "brightness",
    "gauss-noise",
    "pixel-dropout",
)
CANONICAL_SET = KINDS

RANGES = {
    "resize-pad": (0.75, 1.0),
    "rotate": (-15.0, 15.0),
    "translate": (-3, 3),
    "brightness": (0.8, 1.2),
    "gauss-noise": (0.0, 0.05),
    "pixel-dropout": (0.0, 0.1),
}

DIM_PROBABILITY = 0.7

# sentinel source coordinate well outside any image
_OUTSIDE = -4.0


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        p = self.params
        if self.kind == "resize-pad":
            lo, hi = RANGES["resize-pad"]
            if not lo <= p["scale"] <= hi:
                raise ValueError(f"resize scale {p['scale']} outside [{lo}, {hi}]")
        elif self.kind == "rotate":
            lo, hi = RANGES["rotate"]
            if not lo <= p["angle"] <= hi:
                raise ValueError(f"rotation {p['angle']} outside [{lo}, {hi}]")
        elif self.kind == "translate":
            lo, hi = RANGES["translate"]
            if not (lo <= p["dy"] <= hi and lo <= p["dx"] <= hi):
                raise ValueError(f"shift {(p['dy'], p['dx'])} outside [{lo}, {hi}]")
        elif self.kind == "brightness":
            lo, hi = RANGES["brightness"]
            if not lo <= p["factor"] <= hi:
                raise ValueError(f"brightness {p['factor']} outside [{lo}, {hi}]")
        elif self.kind == "gauss-noise":
            lo, hi = RANGES["gauss-noise"]
            if not lo <= p["sigma"] <= hi:
                raise ValueError(f"noise sigma {p['sigma']} outside [{lo}, {hi}]")
        elif self.kind == "pixel-dropout":
            lo, hi = RANGES["pixel-dropout"]
            if not lo <= p["rate"] <= hi:
                raise ValueError(f"dropout rate {p['rate']} outside [{lo}, {hi}]")


def sample_spec(rng: np.random.Generator, kind: str) -> TransformSpec:
    if kind == "identity" or kind == "hflip":
        return TransformSpec(kind)
    if kind == "resize-pad":
        # offsets are drawn as fractions so the spec does not depend on image size
        return TransformSpec(
            kind, {"scale": float(rng.uniform(*RANGES[kind])), "oy": float(rng.random()), "ox": float(rng.random())}
        )
    if kind == "rotate":
        return TransformSpec(kind, {"angle": float(rng.uniform(*RANGES[kind]))})
    if kind == "translate":
        lo, hi = RANGES[kind]
        dy, dx = rng.integers(lo, hi + 1, size=2)
        return TransformSpec(kind, {"dy": int(dy), "dx": int(dx)})
    if kind == "brightness":
        return TransformSpec(kind, {"factor": float(rng.uniform(*RANGES[kind]))})
    if kind == "gauss-noise":
        return TransformSpec(
            kind, {"sigma": float(rng.uniform(*RANGES[kind])), "seed": int(rng.integers(2**63))}
        )
    if kind == "pixel-dropout":
        return TransformSpec(
            kind, {"rate": float(rng.uniform(*RANGES[kind])), "seed": int(rng.integers(2**63))}
        )
    raise ValueError(f"unknown transform kind {kind!r}")


def sample_plan(rng: np.random.Generator, n: int, transform_set=CANONICAL_SET) -> list[TransformSpec]:
    """Assign kinds circularly: variant i gets ``transform_set[i % len(set)]``."""
    transform_set = list(transform_set)
    if not transform_set:
        raise ValueError("transform_set must not be empty")
    if n < 1:
        raise ValueError("group size must be >= 1")
    return [sample_spec(rng, transform_set[i % len(transform_set)]) for i in range(n)]


def sample_dim_spec(rng: np.random.Generator, p: float = DIM_PROBABILITY) -> TransformSpec:
    """Random resize-and-pad with probability ``p``, identity otherwise."""
    if rng.random() < p:
        return sample_spec(rng, "resize-pad")
    return TransformSpec("identity")


# ---------------------------------------------------------------------------
# sampling grids
# ---------------------------------------------------------------------------


def _pixel_grid(h, w):
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def resize_pad_grid(h: int, w: int, scale: float, oy: float, ox: float):
    """Grid that shrinks the image by ``scale`` and pads it back with zeros.

    The resized image (half-pixel-centre bilinear, edge-clamped) sits at
    integer offset ``floor(oy * (h - nh + 1))`` etc.
    """
    nh = max(1, round_half_up(scale * h))
    nw = max(1, round_half_up(scale * w))
    top = min(int(np.floor(oy * (h - nh + 1))), h - nh)
    left = min(int(np.floor(ox * (w - nw + 1))), w - nw)
    ii, jj = _pixel_grid(h, w)
    sy = np.clip((ii - top + 0.5) * (h / nh) - 0.5, 0, h - 1)
    sx = np.clip((jj - left + 0.5) * (w / nw) - 0.5, 0, w - 1)
    inside = (ii >= top) & (ii < top + nh) & (jj >= left) & (jj < left + nw)
    return np.where(inside, sy, _OUTSIDE), np.where(inside, sx, _OUTSIDE)


def rotate_grid(h: int, w: int, angle_deg: float):
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(angle_deg)
    ii, jj = _pixel_grid(h, w)
    # inverse mapping: rotate output coordinates by -angle to find the source
    dy, dx = ii - cy, jj - cx
    sy = np.cos(t) * dy - np.sin(t) * dx + cy
    sx = np.sin(t) * dy + np.cos(t) * dx + cx
    return sy, sx


def translate_grid(h: int, w: int, dy: int, dx: int):
    ii, jj = _pixel_grid(h, w)
    return ii - dy, jj - dx


def hflip_grid(h: int, w: int):
    ii, jj = _pixel_grid(h, w)
    return ii, (w - 1) - jj


def _noise(spec: TransformSpec, shape) -> np.ndarray:
    return np.random.default_rng(spec.params["seed"]).normal(0.0, spec.params["sigma"], size=shape)


def _dropout_mask(spec: TransformSpec, shape) -> np.ndarray:
    u = np.random.default_rng(spec.params["seed"]).random(shape[-2:])
    return np.broadcast_to((u >= spec.params["rate"]).astype(np.float64), shape).copy()


def apply(image, spec: TransformSpec):
    """Apply ``spec`` to a (C,H,W) image; Tensor in, Tensor out (ndarray in, ndarray out)."""
    if not isinstance(image, ng.Tensor):
        tape = ng.Tape("f64")
        return apply(tape.constant(image), spec).data
    if image.ndim != 3:
        raise ng.ShapeError(f"transform {spec.kind}", image.shape, detail="expected (C, H, W)")
    h, w = image.shape[-2:]
    p = spec.params
    if spec.kind == "identity":
        return image
    if spec.kind == "hflip":
        return ng.bilinear_warp(image, *hflip_grid(h, w))
    if spec.kind == "resize-pad":
        return ng.bilinear_warp(image, *resize_pad_grid(h, w, p["scale"], p["oy"], p["ox"]))
    if spec.kind == "rotate":
        return ng.bilinear_warp(image, *rotate_grid(h, w, p["angle"]))
    if spec.kind == "translate":
        return ng.bilinear_warp(image, *translate_grid(h, w, p["dy"], p["dx"]))
    if spec.kind == "brightness":
        return ng.clamp_max1(ng.scale(image, p["factor"]))
    if spec.kind == "gauss-noise":
        return ng.clamp01(ng.add(image, _noise(spec, image.shape)))
    if spec.kind == "pixel-dropout":
        return ng.mul(image, _dropout_mask(spec, image.shape))
    raise ValueError(f"unknown transform kind {spec.kind!r}")
