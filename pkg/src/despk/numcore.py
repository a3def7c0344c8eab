"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Outside a tape context everything runs in
inference mode and nothing is recorded.

    >>> w = Tensor(2.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mse_loss(w * 3.0, 5.0)
    >>> grads = backward(loss)
    >>> float(grads[w])
    6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a forward value or gradient stops being finite."""


_TAPES: list["Tape"] = []


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite value produced from finite inputs")
    return arr


class Tensor:
    """Immutable n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the
    node consuming them.
    """

    nodes: list[Node] = field(default_factory=list)
    next_id: int = 0

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
        out.requires_grad = True
        out.node_id = self.next_id
        out._tape = self
        self.nodes.append(Node(op, inputs, backward_fn))
        self.next_id += 1
        return out


def _emit(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(_checked(data, op))
    if _TAPES and any(t.requires_grad for t in inputs):
        _TAPES[-1].record(out, op, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None,
             wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) through ``tape``.

    Every leaf with ``requires_grad`` reachable from ``loss`` gets its
    ``.grad`` set.  Leaves listed in ``wrt`` but unreachable get zeros.
    Returns a mapping leaf -> gradient array.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    leaf_grads: dict[Tensor, np.ndarray] = {}
    if tape is None or loss.node_id is None:
        if loss.requires_grad:
            leaf_grads[loss] = np.ones_like(loss.data)
    else:
        pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = tape.nodes[nid]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is tape and inp.node_id is not None:
                    prev = pending.get(inp.node_id)
                    pending[inp.node_id] = gi if prev is None else prev + gi
                else:
                    prev = leaf_grads.get(inp)
                    leaf_grads[inp] = gi if prev is None else prev + gi
    for leaf in wrt:
        if leaf not in leaf_grads:
            leaf_grads[leaf] = np.zeros_like(leaf.data)
    for leaf, g in leaf_grads.items():
        _checked(g, "backward")
        leaf.grad = g
    return leaf_grads


# --- elementwise and reductions -------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.size == 1 and a.size != 1:
        return _emit(a.data + b.data.reshape(()), "add", (a, b),
                     lambda g: (g, np.array(g.sum()).reshape(b.shape)))
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.size == 1 and a.size != 1:
        return _emit(a.data - b.data.reshape(()), "sub", (a, b),
                     lambda g: (g, np.array(-g.sum()).reshape(b.shape)))
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    return _emit(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, "scale", (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    """Sum of all elements."""
    return _emit(np.array(a.data.sum()), "sum", (a,),
                 lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _emit(np.array(a.data.mean()), "mean", (a,),
                 lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts), bw)


# --- network layers -------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation of a ``C_in x T`` input with ``C_out x C_in x k`` filters."""
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d: expected input C_in x T and weight C_out x C_in x k, "
                         f"got {x.shape} and {weight.shape}")
    c_in, t = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d: input channels (dim 0 of input) = {c_in} but "
                         f"weight expects C_in = {w_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias length {bias.shape} != C_out = {c_out}")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    if k > t + 2 * padding:
        raise ShapeError(f"conv1d: kernel width {k} exceeds padded time length {t + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, k, axis=1)[:, ::stride]          # C_in x T_out x k
    t_out = win.shape[1]
    cols = win.transpose(0, 2, 1).reshape(c_in * k, t_out)
    w2 = weight.data.reshape(c_out, c_in * k)
    out = w2 @ cols + bias.data[:, None]

    def bw(g):
        gw = (g @ cols.T).reshape(weight.shape)
        gb = g.sum(axis=1)
        gcols = (w2.T @ g).reshape(c_in, k, t_out)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, j:j + span:stride] += gcols[:, j, :]
        gx = gxp[:, padding:padding + t] if padding else gxp
        return gx, gw, gb

    return _emit(out, "conv1d", (x, weight, bias), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride_h: int = 1, stride_w: int = 1,
           pad_h: int = 0, pad_w: int = 0) -> Tensor:
    """2-D cross-correlation of ``C_in x H x W`` with ``C_out x C_in x kh x kw`` filters."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected input C_in x H x W and 4-d weight, "
                         f"got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, w_in, kh, kw = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv2d: input channels (dim 0 of input) = {c_in} but "
                         f"weight expects C_in = {w_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias length {bias.shape} != C_out = {c_out}")
    if min(stride_h, stride_w) < 1 or min(pad_h, pad_w) < 0:
        raise ValueError("conv2d: strides must be >= 1 and paddings >= 0")
    if kh > h + 2 * pad_h:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded height {h + 2 * pad_h}")
    if kw > w + 2 * pad_w:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded width {w + 2 * pad_w}")

    xp = np.pad(x.data, ((0, 0), (pad_h, pad_h), (pad_w, pad_w))) if (pad_h or pad_w) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride_h, ::stride_w]
    h_out, w_out = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    w2 = weight.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, h_out, w_out) + bias.data[:, None, None]

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1)
        gcols = (w2.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        sh = stride_h * (h_out - 1) + 1
        sw = stride_w * (w_out - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh:stride_h, j:j + sw:stride_w] += gcols[:, i, j]
        gx = gxp[:, pad_h:pad_h + h, pad_w:pad_w + w]
        return gx, gw, gb

    return _emit(out, "conv2d", (x, weight, bias), bw)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half of dim 0 times sigmoid of the second half."""
    if x.shape[0] % 2:
        raise ShapeError(f"glu: leading dimension must be even, got {x.shape[0]}")
    c = x.shape[0] // 2
    a, b = x.data[:c], x.data[c:]
    s = expit(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=0),)

    return _emit(a * s, "glu", (x,), bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardisation over the last axis followed by an affine map."""
    if x.data.ndim != 2:
        raise ShapeError(f"instance_norm: expected C x T input, got {x.shape}")
    c, t = x.shape
    if t < 2:
        raise ShapeError(f"instance_norm: time length (dim 1) must be >= 2, got {t}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta must have length C = {c}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    denom = np.sqrt(var + eps)
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = xc * inv
    out = gamma.data[:, None] * xhat + beta.data[:, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=1)
        gbeta = g.sum(axis=1)
        gxh = g * gamma.data[:, None]
        gx = inv / t * (t * gxh - gxh.sum(axis=1, keepdims=True)
                        - xhat * (gxh * xhat).sum(axis=1, keepdims=True))
        return gx, ggamma, gbeta

    return _emit(out, "instance_norm", (x, gamma, beta), bw)


def pixel_shuffle_1d(x: Tensor, r: int) -> Tensor:
    """Rearrange ``(C*r) x T`` into ``C x (r*T)`` with ``out[c, r*t+j] = x[c*r+j, t]``."""
    if r < 1:
        raise ValueError("pixel_shuffle_1d: r must be positive")
    cr, t = x.shape
    if cr % r:
        raise ShapeError(f"pixel_shuffle_1d: channel count {cr} not divisible by r={r}")
    c = cr // r
    out = x.data.reshape(c, r, t).transpose(0, 2, 1).reshape(c, t * r)

    def bw(g):
        return (pixel_unshuffle_1d_array(g, r),)

    return _emit(out, "pixel_shuffle_1d", (x,), bw)


def pixel_unshuffle_1d_array(a: np.ndarray, r: int) -> np.ndarray:
    """Inverse rearrangement of :func:`pixel_shuffle_1d` on a plain array."""
    c, tr = a.shape
    if tr % r:
        raise ShapeError(f"pixel_unshuffle_1d: length {tr} not divisible by r={r}")
    return a.reshape(c, tr // r, r).transpose(0, 2, 1).reshape(c * r, tr // r)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean absolute difference; subgradient 0 at exact ties."""
    b = _as_tensor(b)
    _same_shape(a, b, "l1_loss")
    d = a.data - b.data
    n = d.size

    def bw(g):
        s = np.sign(d) * (float(g) / n)
        return s, -s

    return _emit(np.array(np.abs(d).mean()), "l1_loss", (a, b), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error against a tensor of equal shape or a scalar."""
    target = _as_tensor(target)
    if target.size == 1 and pred.size != 1:
        d = pred.data - target.data.reshape(())
    else:
        _same_shape(pred, target, "mse_loss")
        d = pred.data - target.data
    n = d.size

    def bw(g):
        gp = d * (2.0 * float(g) / n)
        gt = -gp if target.shape == pred.shape else np.array(-gp.sum()).reshape(target.shape)
        return gp, gt

    return _emit(np.array((d ** 2).mean()), "mse_loss", (pred, target), bw)


# --- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; returns new parameter tensors and state."""
    if lr < 0:
        raise ValueError(f"adam_step: learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
    step = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** step)
        vhat = v / (1.0 - b2 ** step)
        new_params[name] = Tensor(p.data - lr * mhat / (np.sqrt(vhat) + eps),
                                  requires_grad=p.requires_grad)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, step, b1, b2, eps)


# --- gradient checking ----------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], target: np.ndarray, h: float = 1e-5,
                   indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``target`` (edited in place)."""
    grad = np.zeros_like(target)
    idx_iter = indices if indices is not None else np.ndindex(*target.shape)
    for idx in idx_iter:
        orig = target[idx]
        target[idx] = orig + h
        fp = fn().item()
        target[idx] = orig - h
        fm = fn().item()
        target[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude.

    ``floor`` bounds the scale from below so that gradients which are
    identically zero (for example a bias feeding a normalisation layer)
    are compared in absolute rather than relative terms.
    """
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor_ratio: float = 1e-3) -> float:
    """Compare tape gradients of scalar ``fn(*tensors)`` against central differences.

    ``arrays`` are the leaf values; they are copied and wrapped as tensors
    requiring gradients.  With ``max_entries`` only that many randomly
    chosen coordinates per array are probed.  Returns the worst relative
    error over all arrays; each array's scale is floored at ``floor_ratio``
    times the largest gradient magnitude seen across all arrays.
    """
    bufs = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(b, requires_grad=True) for b in bufs]
    with Tape():
        loss = fn(*leaves)
    grads = backward(loss, wrt=leaves)
    pairs = []
    for i, buf in enumerate(bufs):
        def f():
            return fn(*[Tensor(b) for b in bufs])

        if max_entries is not None and buf.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(buf.size, size=max_entries, replace=False)
            idx = [np.unravel_index(j, buf.shape) for j in flat]
            num = numerical_grad(f, buf, h, idx)
            ana = np.array([grads[leaves[i]][j] for j in idx])
            num = np.array([num[j] for j in idx])
        else:
            num = numerical_grad(f, buf, h)
            ana = grads[leaves[i]]
        pairs.append((ana, num))
    top = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs),
              default=0.0)
    floor = max(floor_ratio * top, 1e-12)
    return max((relative_error(a, n, floor) for a, n in pairs), default=0.0)
