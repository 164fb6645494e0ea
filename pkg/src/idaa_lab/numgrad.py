"""Small tape-based reverse-mode differentiation over a fixed operator set.

Every value lives in a :class:`Tensor` that belongs to exactly one
:class:`Tape`. Operators are looked up by string id, evaluated eagerly with
numpy, and recorded on the tape together with whatever they need for the
backward sweep.

    tape = Tape("f64")
    w = tape.leaf(np.zeros(3))
    loss = softmax_cross_entropy(tanh(w), target=1)
    (dw,) = tape.backward(loss, [w])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}


class NumgradError(Exception):
    """Base class for engine errors."""


class ShapeError(NumgradError, ValueError):
    def __init__(self, op_id: str, *shapes: tuple, detail: str = ""):
        self.op_id = op_id
        self.shapes = shapes
        msg = f"{op_id}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownOpError(NumgradError, KeyError):
    def __str__(self):
        return f"unknown op id {self.args[0]!r}"


class GradientError(NumgradError):
    """Raised for invalid backward requests (non-scalar loss, foreign leaf)."""


class Tensor:
    __slots__ = ("data", "tape", "index", "requires_grad")

    def __init__(self, data: np.ndarray, tape: Tape, index: int, requires_grad: bool):
        self.data = data
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.index}, grad={self.requires_grad})"


@dataclass
class Node:
    op_id: str | None
    inputs: tuple[int, ...]
    params: dict
    ctx: Any
    requires_grad: bool
    is_leaf: bool = False
    value: Any = None


# ---------------------------------------------------------------------------
# operators: forward(xs, params) -> (out, ctx); backward(g, ctx, xs, params, needs) -> grads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Op:
    forward: Callable
    backward: Callable
    arity: int | tuple[int, int]


def _dense_fwd(xs, p):
    x, w, b = xs
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],) or x.ndim not in (1, 2):
        raise ShapeError("dense", x.shape, w.shape, b.shape)
    return x @ w.T + b, None


def _dense_bwd(g, ctx, xs, p, needs):
    x, w, _ = xs
    gx = g @ w if needs[0] else None
    if x.ndim == 1:
        gw = np.outer(g, x) if needs[1] else None
        gb = g if needs[2] else None
    else:
        gw = g.T @ x if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
    return gx, gw, gb


def _im2col(x):
    # x: (B, C, H, W) -> (B*H*W, C*9), 3x3 window, zero pad 1
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def _conv_fwd(xs, p):
    x, k = xs[0], xs[1]
    bias = xs[2] if len(xs) > 2 else None
    unbatched = x.ndim == 3
    if unbatched:
        x = x[None]
    if (
        x.ndim != 4
        or k.ndim != 4
        or k.shape[1:] != (x.shape[1], 3, 3)
        or (bias is not None and bias.shape != (k.shape[0],))
    ):
        raise ShapeError("conv2d", xs[0].shape, k.shape, *(() if bias is None else (bias.shape,)))
    b, c, h, w = x.shape
    cols = _im2col(x)
    out = cols @ k.reshape(k.shape[0], -1).T
    if bias is not None:
        out = out + bias
    out = out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]
    return np.ascontiguousarray(out), cols


def _conv_bwd(g, cols, xs, p, needs):
    x, k = xs[0], xs[1]
    unbatched = x.ndim == 3
    if unbatched:
        g = g[None]
        x = x[None]
    b, c, h, w = x.shape
    o = k.shape[0]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gx = gk = gb = None
    if needs[0]:
        # transposed convolution: same-padding conv with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_fwd([g, flipped], p)
        if unbatched:
            gx = gx[0]
    if needs[1]:
        gk = (gm.T @ cols).reshape(k.shape)
    if len(xs) > 2 and needs[2]:
        gb = gm.sum(axis=0)
    return (gx, gk, gb)[: len(xs)]


def _relu_fwd(xs, p):
    return np.maximum(xs[0], 0), None


def _relu_bwd(g, ctx, xs, p, needs):
    # subgradient at exactly 0 is 0
    return (g * (xs[0] > 0),)


def _tanh_fwd(xs, p):
    y = np.tanh(xs[0])
    return y, y


def _tanh_bwd(g, y, xs, p, needs):
    return (g * (1 - y * y),)


def _add_fwd(xs, p):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return a + b, None


def _add_bwd(g, ctx, xs, p, needs):
    return g, g


def _smul_fwd(xs, p):
    return xs[0] * p["c"], None


def _smul_bwd(g, ctx, xs, p, needs):
    return (g * p["c"],)


def _mul_fwd(xs, p):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError("elementwise-mul", a.shape, b.shape)
    return a * b, None


def _mul_bwd(g, ctx, xs, p, needs):
    a, b = xs
    return (g * b if needs[0] else None, g * a if needs[1] else None)


def warp_plan(src_y: np.ndarray, src_x: np.ndarray, height: int, width: int):
    """Precompute corner indices and bilinear weights for a sampling grid.

    Corners falling outside the source image get weight 0 (zero padding).
    Returns ``(idx, wts)`` each of shape ``(4, n_out)``.
    """
    sy = np.asarray(src_y, dtype=np.float64).ravel()
    sx = np.asarray(src_x, dtype=np.float64).ravel()
    y0 = np.floor(sy)
    x0 = np.floor(sx)
    fy = sy - y0
    fx = sx - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    idx = np.empty((4, sy.size), dtype=np.int64)
    wts = np.empty((4, sy.size), dtype=np.float64)
    corners = ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx))
    for n, (dy, dx, wt) in enumerate(corners):
        yy = y0 + dy
        xx = x0 + dx
        inside = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
        idx[n] = np.where(inside, yy * width + xx, 0)
        wts[n] = np.where(inside, wt, 0.0)
    return idx, wts


def _warp_fwd(xs, p):
    x = xs[0]
    if x.ndim < 2:
        raise ShapeError("bilinear-warp", x.shape, detail="need (..., H, W)")
    src_y, src_x = p["grid"]
    if np.shape(src_y) != np.shape(src_x) or np.ndim(src_y) != 2:
        raise ShapeError("bilinear-warp", x.shape, np.shape(src_y), np.shape(src_x))
    h, w = x.shape[-2:]
    idx, wts = warp_plan(src_y, src_x, h, w)
    lead = x.shape[:-2]
    flat = x.reshape(-1, h * w)
    wts = wts.astype(x.dtype)
    out = wts[0] * flat[:, idx[0]]
    for n in range(1, 4):
        out = out + wts[n] * flat[:, idx[n]]
    return out.reshape(*lead, *np.shape(src_y)), (idx, wts)


def _warp_bwd(g, ctx, xs, p, needs):
    # gradient flows to source pixels only; the grid is a constant
    idx, wts = ctx
    x = xs[0]
    h, w = x.shape[-2:]
    gf = g.reshape(-1, idx.shape[1])
    gx = np.empty((gf.shape[0], h * w), dtype=g.dtype)
    for r in range(gf.shape[0]):
        acc = np.bincount(idx[0], weights=gf[r] * wts[0], minlength=h * w)
        for n in range(1, 4):
            acc = acc + np.bincount(idx[n], weights=gf[r] * wts[n], minlength=h * w)
        gx[r] = acc
    return (gx.reshape(x.shape),)


def _pool_fwd(xs, p):
    x = xs[0]
    k = p.get("size", 2)
    if x.ndim < 2 or x.shape[-1] % k or x.shape[-2] % k:
        raise ShapeError("mean-pool", x.shape, detail=f"spatial dims must be divisible by {k}")
    h, w = x.shape[-2:]
    y = x.reshape(*x.shape[:-2], h // k, k, w // k, k).mean(axis=(-3, -1))
    return y, None


def _pool_bwd(g, ctx, xs, p, needs):
    k = p.get("size", 2)
    gx = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
    return (gx,)


def _flatten_fwd(xs, p):
    x = xs[0]
    keep = p.get("keep", 0)
    if keep > x.ndim:
        raise ShapeError("flatten", x.shape, detail=f"keep={keep}")
    return x.reshape(*x.shape[:keep], -1), None


def _flatten_bwd(g, ctx, xs, p, needs):
    return (g.reshape(xs[0].shape),)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _ce_fwd(xs, p):
    z = xs[0]
    target = np.asarray(p["target"])
    if z.ndim == 1:
        if target.ndim != 0:
            raise ShapeError("softmax-cross-entropy", z.shape, target.shape)
        lp = _log_softmax(z)
        return np.asarray(-lp[int(target)], dtype=z.dtype), lp
    if z.ndim != 2 or target.shape not in ((z.shape[0],), ()):
        raise ShapeError("softmax-cross-entropy", z.shape, target.shape)
    target = np.broadcast_to(target, (z.shape[0],))
    lp = _log_softmax(z)
    picked = -lp[np.arange(z.shape[0]), target]
    loss = picked.sum() if p.get("reduction", "mean") == "sum" else picked.mean()
    return np.asarray(loss, dtype=z.dtype), lp


def _ce_bwd(g, lp, xs, p, needs):
    z = xs[0]
    prob = np.exp(lp)
    target = np.asarray(p["target"])
    if z.ndim == 1:
        prob[int(target)] -= 1
        return (prob * g,)
    target = np.broadcast_to(target, (z.shape[0],))
    prob[np.arange(z.shape[0]), target] -= 1
    if p.get("reduction", "mean") != "sum":
        prob /= z.shape[0]
    return (prob * g,)


OPS: dict[str, Op] = {
    "dense": Op(_dense_fwd, _dense_bwd, 3),
    "conv2d": Op(_conv_fwd, _conv_bwd, (2, 3)),
    "relu": Op(_relu_fwd, _relu_bwd, 1),
    "tanh": Op(_tanh_fwd, _tanh_bwd, 1),
    "add": Op(_add_fwd, _add_bwd, 2),
    "scalar-mul": Op(_smul_fwd, _smul_bwd, 1),
    "elementwise-mul": Op(_mul_fwd, _mul_bwd, 2),
    "bilinear-warp": Op(_warp_fwd, _warp_bwd, 1),
    "mean-pool": Op(_pool_fwd, _pool_bwd, 1),
    "flatten": Op(_flatten_fwd, _flatten_bwd, 1),
    "softmax-cross-entropy": Op(_ce_fwd, _ce_bwd, 1),
}


class Tape:
    """Append-only record of operations; single owner, not thread-safe."""

    def __init__(self, precision: str = "f64"):
        if precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {precision!r}")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, data, node: Node) -> Tensor:
        node.value = data
        self.nodes.append(node)
        return Tensor(data, self, len(self.nodes) - 1, node.requires_grad)

    def leaf(self, value) -> Tensor:
        """Record a differentiable input."""
        data = np.array(value, dtype=self.dtype)
        return self._push(data, Node(None, (), {}, None, True, is_leaf=True))

    def constant(self, value) -> Tensor:
        data = np.asarray(value, dtype=self.dtype)
        return self._push(data, Node(None, (), {}, None, False))

    def lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise NumgradError("tensor belongs to a different tape")
            return value
        return self.constant(value)

    def forward(self, op_id: str, inputs: Sequence, **params) -> Tensor:
        try:
            op = OPS[op_id]
        except KeyError:
            raise UnknownOpError(op_id) from None
        lo, hi = (op.arity, op.arity) if isinstance(op.arity, int) else op.arity
        if not lo <= len(inputs) <= hi:
            raise ShapeError(op_id, *(np.shape(getattr(x, "data", x)) for x in inputs), detail="wrong input count")
        ts = [self.lift(x) for x in inputs]
        out, ctx = op.forward([t.data for t in ts], params)
        out = np.asarray(out, dtype=self.dtype)
        need = any(t.requires_grad for t in ts)
        return self._push(out, Node(op_id, tuple(t.index for t in ts), params, ctx, need))

    def vjp(self, output: Tensor, seed, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        """Pull ``seed`` (same shape as ``output``) back to each leaf."""
        if output.tape is not self:
            raise GradientError("output is not on this tape")
        for lf in leaves:
            if lf.tape is not self or not self.nodes[lf.index].is_leaf:
                raise GradientError(f"{lf!r} is not a leaf of this tape")
        seed = np.asarray(seed, dtype=self.dtype)
        if seed.shape != output.shape:
            raise ShapeError("vjp", output.shape, seed.shape)
        grads: dict[int, np.ndarray] = {output.index: seed}
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.op_id is None or not node.requires_grad:
                continue
            xs = [self.nodes[j].value for j in node.inputs]
            needs = [self.nodes[j].requires_grad for j in node.inputs]
            gin = OPS[node.op_id].backward(g, node.ctx, xs, node.params, needs)
            for j, gj, nd in zip(node.inputs, gin, needs):
                if not nd or gj is None:
                    continue
                prev = grads.get(j)
                grads[j] = gj if prev is None else prev + gj
        return [
            np.asarray(grads[lf.index], dtype=self.dtype) if lf.index in grads else np.zeros_like(lf.data)
            for lf in leaves
        ]

    def backward(self, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        """Return dLoss/dLeaf for each requested leaf."""
        if loss.data.size != 1:
            raise GradientError(f"loss must be scalar, got shape {loss.shape}")
        return self.vjp(loss, np.ones_like(loss.data), leaves)


# ---------------------------------------------------------------------------
# functional front end
# ---------------------------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise NumgradError("at least one argument must be a Tensor")


def dense(x, weight, bias) -> Tensor:
    return _tape_of(x, weight, bias).forward("dense", [x, weight, bias])


def conv2d(x, kernel, bias=None) -> Tensor:
    ins = [x, kernel] if bias is None else [x, kernel, bias]
    return _tape_of(*ins).forward("conv2d", ins)


def relu(x: Tensor) -> Tensor:
    return x.tape.forward("relu", [x])


def tanh(x: Tensor) -> Tensor:
    return x.tape.forward("tanh", [x])


def add(a, b) -> Tensor:
    return _tape_of(a, b).forward("add", [a, b])


def scale(x: Tensor, c: float) -> Tensor:
    return x.tape.forward("scalar-mul", [x], c=float(c))


def mul(a, b) -> Tensor:
    return _tape_of(a, b).forward("elementwise-mul", [a, b])


def bilinear_warp(x: Tensor, src_y, src_x) -> Tensor:
    """Sample ``x`` at fractional source coordinates; out-of-bounds reads 0."""
    return x.tape.forward("bilinear-warp", [x], grid=(np.asarray(src_y), np.asarray(src_x)))


def mean_pool(x: Tensor, size: int = 2) -> Tensor:
    return x.tape.forward("mean-pool", [x], size=int(size))


def flatten(x: Tensor, keep: int = 0) -> Tensor:
    return x.tape.forward("flatten", [x], keep=int(keep))


def softmax_cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    return logits.tape.forward("softmax-cross-entropy", [logits], target=target, reduction=reduction)


def clamp01(x: Tensor) -> Tensor:
    """min(max(x, 0), 1) built from relu: relu(x) - relu(x - 1)."""
    shifted = add(x, np.full(x.shape, -1.0))
    return add(relu(x), scale(relu(shifted), -1.0))


def clamp_max1(x: Tensor) -> Tensor:
    """min(x, 1) as x - relu(x - 1)."""
    return add(x, scale(relu(add(x, np.full(x.shape, -1.0))), -1.0))


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function (test oracle)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
