"""Local mixup: blend a random patch of one variant with a same-size patch of another."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .xform import round_half_up


@dataclass(frozen=True)
class RegionSpec:
    r1_row: int
    r1_col: int
    r2_row: int
    r2_col: int
    height: int
    width: int
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.height < 1 or self.width < 1:
            raise ValueError("region must be at least 1x1")

    def check_bounds(self, h: int, w: int) -> None:
        for name, row, col in (("R1", self.r1_row, self.r1_col), ("R2", self.r2_row, self.r2_col)):
            if row < 0 or col < 0 or row + self.height > h or col + self.width > w:
                raise ValueError(
                    f"region {name} at ({row}, {col}) size {self.height}x{self.width} "
                    f"does not fit a {h}x{w} image"
                )


@dataclass(frozen=True)
class MixupConfig:
    ratio: float = 0.7
    repeats: int = 3
    beta_a: float = 1.0
    beta_b: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must lie in (0, 1]")
        if self.repeats < 0:
            raise ValueError("repeats must be >= 0")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta parameters must be positive")

    def side(self, n: int) -> int:
        return max(1, round_half_up(self.ratio * n))


def pair_groups(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Pair variant i with variant perm[i] for a uniformly random permutation."""
    if n < 1:
        raise ValueError("cannot pair an empty group")
    perm = rng.permutation(n)
    return [(i, int(perm[i])) for i in range(n)]


def mix_once(a, b, region: RegionSpec):
    """``a`` with region R1 replaced by ``lam*a[R1] + (1-lam)*b[R2]``.

    Built from a shift-warp of ``b`` and two masks so it stays differentiable
    in both inputs. Accepts Tensors or plain arrays (returns the same kind).
    """
    if not isinstance(a, ng.Tensor) and not isinstance(b, ng.Tensor):
        tape = ng.Tape("f64")
        return mix_once(tape.constant(a), tape.constant(b), region).data
    tape = a.tape if isinstance(a, ng.Tensor) else b.tape
    a, b = tape.lift(a), tape.lift(b)
    if a.shape != b.shape:
        raise ng.ShapeError("mix_once", a.shape, b.shape)
    h, w = a.shape[-2:]
    region.check_bounds(h, w)
    mask = np.zeros(a.shape)
    mask[..., region.r1_row : region.r1_row + region.height, region.r1_col : region.r1_col + region.width] = 1.0
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    shifted = ng.bilinear_warp(b, ii + (region.r2_row - region.r1_row), jj + (region.r2_col - region.r1_col))
    keep = 1.0 - (1.0 - region.lam) * mask
    take = (1.0 - region.lam) * mask
    return ng.add(ng.mul(a, keep), ng.mul(shifted, take))


def sample_region(shape, cfg: MixupConfig, rng: np.random.Generator) -> RegionSpec:
    h, w = shape[-2:]
    rh, rw = cfg.side(h), cfg.side(w)
    r1_row, r1_col, r2_row, r2_col = (int(v) for v in rng.integers(0, [h - rh + 1, w - rw + 1] * 2))
    lam = float(rng.beta(cfg.beta_a, cfg.beta_b))
    return RegionSpec(r1_row, r1_col, r2_row, r2_col, rh, rw, lam)


def local_mixup(group: list, cfg: MixupConfig, rng: np.random.Generator) -> list:
    """Run ``cfg.repeats`` rounds of index-aligned pairwise mixing.

    Each round draws a fresh permutation, then per pair fresh R1/R2 positions
    and a fresh Beta-distributed lambda. The round reads the previous group
    and its output becomes the input of the next round.
    """
    if not group:
        raise ValueError("cannot mix an empty group")
    for _ in range(cfg.repeats):
        pairs = pair_groups(len(group), rng)
        group = [mix_once(group[i], group[j], sample_region(group[i].shape, cfg, rng)) for i, j in pairs]
    return list(group)
