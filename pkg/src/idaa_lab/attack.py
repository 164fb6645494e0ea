"""Targeted transfer attacks: IDAA plus the MI and DIM baselines.

IDAA optimises an unconstrained variable ``w`` whose tanh image is mapped
into the per-pixel feasible box, so the adversarial image never needs
clipping. Each step averages L1-normalised gradients over a group of
transformed and locally mixed variants and applies a two-moment update
without bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numgrad as ng
from .mixup import MixupConfig, local_mixup
from .models import ModelWeights, forward
from .xform import CANONICAL_SET, DIM_PROBABILITY, TransformSpec, apply, sample_dim_spec, sample_plan

BETA_PRESETS = {
    "default": (0.99, 0.999),
    "beta-appendix": (0.0, 0.1),
}
LOSS_MODES = ("triplet", "ce")
STEP_RULES = ("adaptive", "identical")


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 0.07
    steps: int = 10
    alpha: float = 1.0
    group_size: int = 10
    gamma: float = 0.1
    beta1: float = 0.99
    beta2: float = 0.999
    delta: float = 1e-8
    mixup: MixupConfig = field(default_factory=MixupConfig)
    transform_set: tuple = CANONICAL_SET
    loss: str = "triplet"
    # "identical" is the IDAA-MI ablation: sign step on an accumulated gradient in w-space
    step_rule: str = "adaptive"
    mu: float = 1.0
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "transform_set", tuple(self.transform_set))
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if not self.transform_set:
            raise ValueError("transform_set must not be empty")

    def with_betas(self, preset: str) -> AttackConfig:
        b1, b2 = BETA_PRESETS[preset]
        return replace(self, beta1=b1, beta2=b2)


@dataclass(frozen=True)
class MIConfig:
    """Direct-space momentum baseline; ``alpha`` defaults to eps / steps."""

    eps: float = 0.07
    steps: int = 10
    mu: float = 1.0
    alpha: float | None = None
    loss: str = "ce"
    gamma: float = 0.1
    diversity_prob: float = DIM_PROBABILITY
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if not 0 <= self.diversity_prob <= 1:
            raise ValueError("diversity_prob must lie in [0, 1]")

    @property
    def step_size(self) -> float:
        return self.eps / self.steps if self.alpha is None else self.alpha


@dataclass(frozen=True)
class AttackTask:
    x: np.ndarray
    y_src: int
    y_tgt: int
    surrogates: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "surrogates", tuple(self.surrogates))
        if self.y_src == self.y_tgt:
            raise ValueError("target label must differ from source label")

    def check(self):
        if not self.surrogates:
            raise ValueError("task has no surrogate models")


@dataclass
class PerturbationState:
    w: np.ndarray
    m: np.ndarray
    v: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    t: int = 0


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    losses: list
    linf: list
    steps: int
    y_src: int
    y_tgt: int


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def perturbation_bounds(x: np.ndarray, eps: float):
    """Per-pixel (lower, upper) limits on r so that x + r stays valid."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise ValueError("image values must lie in [0, 1]")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    return -np.minimum(x, eps), np.minimum(1 - x, eps)


def project(w, lower, upper):
    """r = lower + (upper - lower) * (tanh(w)/2 + 0.5)."""
    bnd = np.asarray(upper) - np.asarray(lower)
    if isinstance(w, ng.Tensor):
        s = ng.add(ng.scale(ng.tanh(w), 0.5), np.full(w.shape, 0.5))
        return ng.add(ng.mul(s, bnd), np.broadcast_to(lower, w.shape))
    return lower + bnd * (np.tanh(w) / 2.0 + 0.5)


def adversarial_image(x, w, lower, upper) -> np.ndarray:
    return x + (lower + (upper - lower) * (np.tanh(w) / 2.0 + 0.5))


def attack_loss(logits, y_src: int, y_tgt: int, gamma: float, mode: str = "triplet", reduction: str = "mean"):
    pos = ng.softmax_cross_entropy(logits, y_tgt, reduction)
    if mode == "ce":
        return pos
    neg = ng.softmax_cross_entropy(logits, y_src, reduction)
    return ng.add(pos, ng.scale(neg, -gamma))


def triplet_loss(logits, y_src: int, y_tgt: int, gamma: float):
    """CE(logits, y_tgt) - gamma * CE(logits, y_src).

    Tensor logits give a Tensor on the same tape; arrays give a float.
    """
    if y_src == y_tgt:
        raise ValueError("y_src and y_tgt must differ")
    if isinstance(logits, ng.Tensor):
        return attack_loss(logits, y_src, y_tgt, gamma)
    tape = ng.Tape("f64")
    return float(attack_loss(tape.constant(logits), y_src, y_tgt, gamma).data)


def averaged_gradient(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of per-variant gradients, each scaled by its own L1 norm (0/0 -> 0)."""
    if not grads:
        raise ValueError("need at least one gradient")
    total = np.zeros_like(np.asarray(grads[0], dtype=np.float64))
    for g in grads:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != total.shape:
            raise ValueError(f"gradient shapes differ: {g.shape} vs {total.shape}")
        norm = np.abs(g).sum()
        if norm > 0:
            total = total + g / norm
    return total / len(grads)


def momentum_step(state: PerturbationState, g: np.ndarray, cfg) -> PerturbationState:
    """m, v exponential averages then w -= alpha * m / sqrt(v + delta); no bias correction."""
    if g.shape != state.w.shape:
        raise ValueError(f"gradient shape {g.shape} != state shape {state.w.shape}")
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    denom = np.sqrt(v + cfg.delta)
    step = np.divide(m, denom, out=np.zeros_like(m), where=denom > 0)
    return replace(state, w=state.w - cfg.alpha * step, m=m, v=v, t=state.t + 1)


def identical_step(state: PerturbationState, g: np.ndarray, cfg) -> PerturbationState:
    """MI-style update in w-space: m = mu*m + g, w -= alpha * sign(m)."""
    m = cfg.mu * state.m + g
    return replace(state, w=state.w - cfg.alpha * np.sign(m), m=m, t=state.t + 1)


def aggregate_ensemble(logits_list: Sequence):
    """Elementwise mean of logits (arrays or Tensors), summed in list order."""
    if not logits_list:
        raise ValueError("need at least one set of logits")
    shapes = {tuple(np.shape(getattr(z, "data", z))) for z in logits_list}
    if len(shapes) != 1:
        raise ValueError(f"logit shapes differ: {sorted(shapes)}")
    if len(logits_list) == 1:
        return logits_list[0]
    if any(isinstance(z, ng.Tensor) for z in logits_list):
        acc = logits_list[0]
        for z in logits_list[1:]:
            acc = ng.add(acc, z)
        return ng.scale(acc, 1.0 / len(logits_list))
    acc = np.asarray(logits_list[0], dtype=np.float64)
    for z in logits_list[1:]:
        acc = acc + z
    return acc / len(logits_list)


def surrogate_logits(surrogates: Sequence[ModelWeights], x: ng.Tensor) -> ng.Tensor:
    return aggregate_ensemble([forward(m, x) for m in surrogates])


# ---------------------------------------------------------------------------
# IDAA
# ---------------------------------------------------------------------------


def idaa_gradient(state: PerturbationState, x: np.ndarray, task: AttackTask, cfg: AttackConfig, rng):
    """One step's averaged gradient in w-space and the mean variant loss.

    The pre-model graph (projection, transforms, mixup) lives on one tape and
    the batched surrogate pass on another; each variant's input gradient is
    pulled back to ``w`` separately so it can be L1-normalised on its own.
    """
    tape = ng.Tape(cfg.precision)
    w = tape.leaf(state.w)
    x_adv = ng.add(project(w, state.lower, state.upper), x)
    plan = sample_plan(rng, cfg.group_size, cfg.transform_set)
    variants = [apply(x_adv, spec) for spec in plan]
    variants = local_mixup(variants, cfg.mixup, rng)

    mtape = ng.Tape(cfg.precision)
    batch = mtape.leaf(np.stack([v.data for v in variants]))
    logits = surrogate_logits(task.surrogates, batch)
    loss = attack_loss(logits, task.y_src, task.y_tgt, cfg.gamma, cfg.loss, reduction="sum")
    (gin,) = mtape.backward(loss, [batch])

    grads = [tape.vjp(v, gin[i], [w])[0] for i, v in enumerate(variants)]
    return averaged_gradient(grads), float(loss.data) / len(variants)


def run_idaa(task: AttackTask, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackOutcome:
    task.check()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    x = np.asarray(task.x, dtype=np.float64)
    lower, upper = perturbation_bounds(x, cfg.eps)
    state = PerturbationState(
        w=rng.standard_normal(x.shape), m=np.zeros_like(x), v=np.zeros_like(x), lower=lower, upper=upper
    )
    update = momentum_step if cfg.step_rule == "adaptive" else identical_step
    losses, linf = [], []
    for _ in range(cfg.steps):
        g, loss = idaa_gradient(state, x, task, cfg, rng)
        state = update(state, g, cfg)
        losses.append(loss)
        linf.append(float(np.abs(project(state.w, lower, upper)).max()))
    x_adv = adversarial_image(x, state.w, lower, upper)
    return AttackOutcome(x_adv, losses, linf, state.t, task.y_src, task.y_tgt)


# ---------------------------------------------------------------------------
# direct-space baselines
# ---------------------------------------------------------------------------


def _direct_attack(
    task: AttackTask,
    cfg: MIConfig,
    pick: Callable[[np.random.Generator], TransformSpec],
    rng: np.random.Generator,
) -> AttackOutcome:
    task.check()
    x = np.asarray(task.x, dtype=np.float64)
    perturbation_bounds(x, cfg.eps)
    alpha = cfg.step_size
    x_t = x.copy()
    acc = np.zeros_like(x)
    losses, linf = [], []
    for _ in range(cfg.steps):
        tape = ng.Tape(cfg.precision)
        xt = tape.leaf(x_t)
        logits = surrogate_logits(task.surrogates, apply(xt, pick(rng)))
        loss = attack_loss(logits, task.y_src, task.y_tgt, cfg.gamma, cfg.loss)
        (grad,) = tape.backward(loss, [xt])
        grad = np.asarray(grad, dtype=np.float64)
        norm = np.abs(grad).sum()
        acc = cfg.mu * acc + (grad / norm if norm > 0 else grad)
        r = np.clip(x_t - alpha * np.sign(acc) - x, -cfg.eps, cfg.eps)
        x_t = np.clip(x + r, 0.0, 1.0)
        losses.append(float(loss.data))
        linf.append(float(np.abs(x_t - x).max()))
    return AttackOutcome(x_t, losses, linf, cfg.steps, task.y_src, task.y_tgt)


def run_mi_baseline(task: AttackTask, cfg: MIConfig, rng: np.random.Generator | None = None) -> AttackOutcome:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return _direct_attack(task, cfg, lambda _: TransformSpec("identity"), rng)


def run_dim_mode(task: AttackTask, cfg: MIConfig, rng: np.random.Generator | None = None) -> AttackOutcome:
    """MI with a random resize-and-pad applied with probability ``cfg.diversity_prob``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return _direct_attack(task, cfg, lambda r: sample_dim_spec(r, cfg.diversity_prob), rng)
