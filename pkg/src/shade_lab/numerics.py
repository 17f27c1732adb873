"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of ops the training objective needs are provided. A graph
node is recorded only when at least one input requires a gradient, so
frozen-teacher and evaluation passes build no graph at all.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError, UnsupportedOpError

DEFAULT_STD_EPS = 1e-6

_debug = False
# Collector for near-singular evaluations, active only inside grad_check.
_singular_log: list[str] | None = None
_singular_margin = 0.0


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Check every op's inputs and output for NaN/Inf while active."""
    global _debug
    prev, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = prev


def debug_enabled() -> bool:
    return _debug


class Node:
    __slots__ = ("kind", "inputs", "backward_fn", "differentiable")

    def __init__(self, kind, inputs, backward_fn, differentiable=True):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.differentiable = differentiable


class Tensor:
    """A float64 array plus an optional gradient slot and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        kind = self.node.kind if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_affine(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value", op=kind)


def _record(kind, data, inputs, backward_fn, differentiable=True) -> Tensor:
    if _debug:
        _check_finite(kind, [t.data for t in inputs])
        _check_finite(kind, [data])
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(kind, inputs, backward_fn, differentiable)
    return out


def _flag_singular(kind: str) -> None:
    if _singular_log is not None:
        _singular_log.append(kind)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scalar_affine(a, alpha: float, beta: float = 0.0) -> Tensor:
    """alpha * a + beta with Python scalars."""
    a = as_tensor(a)
    alpha = float(alpha)
    return _record("scalar_affine", alpha * a.data + beta, (a,), lambda g: (alpha * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    if _singular_log is not None and np.any(np.abs(x.data) < _singular_margin):
        _flag_singular("relu")
    mask = x.data > 0
    return _record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def log(x, floor: float = 0.0) -> Tensor:
    """Natural log; values below `floor` are clamped and pass no gradient."""
    x = as_tensor(x)
    if floor > 0:
        live = x.data > floor
        safe = np.where(live, x.data, floor)
        if _singular_log is not None and np.any(np.abs(x.data - floor) < _singular_margin):
            _flag_singular("log")
    else:
        if np.any(x.data <= 0):
            raise NumericError("log of non-positive value", op="log")
        live = None
        safe = x.data

    def bw(g):
        gx = g / safe
        return (gx if live is None else np.where(live, gx, 0.0),)

    return _record("log", np.log(safe), (x,), bw)


# -- reductions and shape ----------------------------------------------------

def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _record("sum", np.asarray(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _record("mean", np.asarray(x.data.mean()), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def masked_mean(x, mask) -> Tensor:
    """Mean of `x` over positions where the (broadcast) mask is nonzero.

    A mask with no selected element yields 0 with zero gradient.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    try:
        m = np.broadcast_to(m, x.shape)
    except ValueError:
        raise ShapeError(f"masked_mean: mask {np.shape(mask)} vs input {x.shape}") from None
    count = m.sum()
    if count == 0:
        return _record("masked_mean", np.asarray(0.0), (x,), lambda g: (np.zeros(x.shape),))
    return _record("masked_mean", np.asarray((x.data * m).sum() / count), (x,),
                   lambda g: (g * m / count,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """x @ w.T + b for x (N, in), w (out, in)."""
    w = as_tensor(w)
    out = matmul(x, _transpose2d(w))
    return out if b is None else add(out, b)


def _transpose2d(w: Tensor) -> Tensor:
    return _record("transpose", w.data.T, (w,), lambda g: (g.T,))


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW, zero padding (k-1)//2 on each side.

    Padding keeps the spatial size at stride 1; at stride 2 the output is
    ceil(H/2) for odd kernels.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        inputs = (x, w, b)

    pad = (kh - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (_conv_input_grad_s1(g, w.data, h, wd) if stride == 1
                  else _conv_input_grad_loop(g2, wmat, xp.shape, n, ho, wo, stride, kh, pad, h, wd))
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("conv2d", out, inputs, bw)


def _conv_input_grad_s1(g, w, h, wd):
    """Stride-1 input gradient as a correlation of the padded output
    gradient with the spatially flipped, channel-transposed kernel."""
    n, cout = g.shape[:2]
    cin, k = w.shape[1], w.shape[2]
    q = k - 1 - (k - 1) // 2
    gp = np.pad(g.transpose(0, 2, 3, 1), ((0, 0), (q, q), (q, q), (0, 0)))
    win = sliding_window_view(gp, (k, k), axis=(1, 2))
    gcols = win.reshape(n * h * wd, cout * k * k)
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
    return (gcols @ wflip.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)


def _conv_input_grad_loop(g2, wmat, xp_shape, n, ho, wo, stride, k, pad, h, wd):
    cin = xp_shape[1]
    dcols = (g2 @ wmat).reshape(n, ho, wo, cin, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
    return dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp


# -- channel statistics ------------------------------------------------------

def _require_nchw(kind, x):
    if x.ndim != 4:
        raise ShapeError(f"{kind}: expected (N, C, H, W), got {x.shape}")


def channel_mean(x) -> Tensor:
    """Spatial mean per (sample, channel): (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    _require_nchw("channel_mean", x)
    hw = x.shape[2] * x.shape[3]
    return _record("channel_mean", x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape),))


def global_avg_pool(x) -> Tensor:
    out = channel_mean(x)
    if out.node is not None:
        out.node.kind = "global_avg_pool"
    return out


def channel_std(x, eps: float = DEFAULT_STD_EPS) -> Tensor:
    """sqrt(population variance + eps) per (sample, channel)."""
    if eps <= 0:
        raise ContractError("channel_std: eps must be positive")
    x = as_tensor(x)
    _require_nchw("channel_std", x)
    hw = x.shape[2] * x.shape[3]
    centered = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    var = (centered * centered).mean(axis=(2, 3))
    if _singular_log is not None and np.any(var < eps):
        _flag_singular("channel_std")
    std = np.sqrt(var + eps)
    return _record("channel_std", std, (x,),
                   lambda g: (g[:, :, None, None] * centered / (hw * std[:, :, None, None]),))


def channel_affine(x, scale, shift) -> Tensor:
    """x * scale + shift with per-channel (C,) or per-sample (N, C) coefficients."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    _require_nchw("channel_affine", x)
    n, c = x.shape[:2]
    for name, t in (("scale", scale), ("shift", shift)):
        if t.shape not in ((c,), (n, c)):
            raise ShapeError(f"channel_affine: {name} shape {t.shape} incompatible with {x.shape}")
    s4 = scale.data.reshape(scale.shape + (1, 1)) if scale.ndim == 2 else scale.data[:, None, None]
    t4 = shift.data.reshape(shift.shape + (1, 1)) if shift.ndim == 2 else shift.data[:, None, None]

    def bw(g):
        gs = (g * x.data).sum(axis=(2, 3)) if scale.requires_grad else None
        gt = g.sum(axis=(2, 3)) if shift.requires_grad else None
        if scale.ndim == 1 and gs is not None:
            gs = gs.sum(axis=0)
        if shift.ndim == 1 and gt is not None:
            gt = gt.sum(axis=0)
        return g * s4, gs, gt

    return _record("channel_affine", x.data * s4 + t4, (x, scale, shift), bw)


# -- class-axis ops ----------------------------------------------------------

def softmax(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", out, (x,),
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- non-differentiable ------------------------------------------------------

def downsample_nearest(x, factor: int = 2):
    """Keep every `factor`-th row and column (top-left sample of each block).

    Meant for label maps. Plain arrays come back as arrays; a Tensor that
    requires grad records a node whose backward refuses to run.
    """
    if factor < 1:
        raise ContractError("downsample_nearest: factor must be >= 1")
    if not isinstance(x, Tensor):
        return np.asarray(x)[..., ::factor, ::factor]

    def bw(g):
        raise UnsupportedOpError("downsample_nearest has no gradient")

    return _record("downsample_nearest", x.data[..., ::factor, ::factor], (x,), bw,
                   differentiable=False)


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_affine": scalar_affine,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "channel_mean": channel_mean,
    "channel_std": channel_std,
    "channel_affine": channel_affine,
    "global_avg_pool": global_avg_pool,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "square": square,
    "masked_mean": masked_mean,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "downsample_nearest": downsample_nearest,
}


def forward_op(kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. forward_op("conv2d", [x, w, b], stride=2)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise UnsupportedOpError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# -- backward ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's `.grad`.

    Leaf gradients accumulate across calls; callers reset them per step.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones(loss.shape)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise ShapeError(f"backward: upstream grad {grad.shape} vs output {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): grad}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g) if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


def graph_kinds(root: Tensor) -> list[str]:
    return [t.node.kind for t in _topo_order(root) if t.node is not None]


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_err: float
    tol: float
    near_singular: bool = False
    singular_ops: tuple[str, ...] = ()
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = (not self.near_singular) and self.max_rel_err < self.tol


def grad_check(build: Callable[[dict[str, Tensor]], Tensor], inputs: dict[str, np.ndarray],
               eps: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    `build` maps a dict of leaf tensors to a scalar. The relative error of a
    parameter is max|analytic - numeric| / max(max|analytic|, max|numeric|),
    i.e. the gradient is compared as a whole vector in the infinity norm.
    Evaluations that land within 10*eps of an op singularity (ReLU kink,
    zero-variance std, log floor) mark the report near-singular; such a
    report never passes and suites exclude it.
    """
    global _singular_log, _singular_margin
    if eps <= 0 or tol <= 0:
        raise ContractError("grad_check: eps and tol must be positive")
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    log_prev, margin_prev = _singular_log, _singular_margin
    _singular_log, _singular_margin = [], 10 * eps
    try:
        leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in values.items()}
        out = build(leaves)
        if out.data.size != 1:
            raise ContractError("grad_check: build must return a scalar")
        bad = [t.node.kind for t in _topo_order(out)
               if t.node is not None and not t.node.differentiable]
        if bad:
            raise UnsupportedOpError(f"non-differentiable op in subgraph: {bad[0]}")
        backward(out)

        def f(vals):
            return float(build({k: Tensor(v) for k, v in vals.items()}).data)

        per_param = {}
        for name, arr in values.items():
            analytic = leaves[name].grad
            if analytic is None:
                analytic = np.zeros_like(arr)
            numeric = np.zeros_like(arr)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(values)
                flat[i] = orig - eps
                fm = f(values)
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
            scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
            err = np.abs(analytic - numeric).max(initial=0.0)
            per_param[name] = 0.0 if scale == 0 else float(err / scale)
        singular = tuple(dict.fromkeys(_singular_log))
    finally:
        _singular_log, _singular_margin = log_prev, margin_prev
    return GradCheckReport(per_param, max(per_param.values(), default=0.0), tol,
                           near_singular=bool(singular), singular_ops=singular)
