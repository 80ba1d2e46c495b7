"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. Recording only happens inside a ``with Tape():``
block; outside of one every op is a plain numpy computation.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = sum(power(x, 2.0))
    >>> backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

POWER_EPS = 1e-6

_local = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    """A numpy array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float32 else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

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
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape" = field(repr=False)


class Tape:
    """Ordered record of the operations executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise TapeError("cannot record on a tape that has already been replayed; call reset()")
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn, tape)
        out._node = node
        tape.nodes.append(node)
    return out


def custom_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Record a user-defined op. ``backward_fn(g)`` returns one gradient (or None) per input."""
    return _record(op, np.asarray(out_data), inputs, backward_fn)


def backward(loss: Tensor) -> None:
    """Replay the tape that produced ``loss`` and fill ``.grad`` on every leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeError("backward: loss was not produced on a recording tape")
    tape = node.tape
    if not tape.nodes:
        raise TapeError("backward: tape is empty")
    if tape.consumed:
        raise TapeError("backward: tape already replayed; reset it before another pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    stop = tape.nodes.index(node)
    for n in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(n.out), None)
        for t in n.inputs:
            if t.requires_grad and t._node is None:
                leaves[id(t)] = t
        if g is None:
            continue
        in_grads = n.backward(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = gi.reshape(t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)


def grad(loss_fn: Callable[..., Tensor], *params: Tensor) -> list[np.ndarray]:
    """Evaluate ``loss_fn`` on a fresh tape and return the gradients of ``params``."""
    with Tape():
        loss = loss_fn(*params)
    backward(loss)
    return [p.grad for p in params]


# ---------------------------------------------------------------- elementwise


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise _shape_error(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def power(x: Tensor, p: float, eps: float = POWER_EPS) -> Tensor:
    """max(x, eps) ** p for x >= 0."""
    xd = x.data
    if np.any(xd < 0):
        raise DomainError("power: negative input")
    base = np.maximum(xd, eps)
    out = base**p
    live = xd >= eps

    def bw(g):
        return (g * p * base ** (p - 1) * live,)

    return _record("power", out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log: non-positive input")
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T, (a,), lambda g: (g.T,))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W or C,H,W) with square kernels ``w`` (O,C,k,k)."""
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise _shape_error("conv2d", x.shape, w.shape)
    out = permute(conv2d_nhwc(permute(x, (0, 2, 3, 1)), w, b, stride, padding), (0, 3, 1, 2))
    return reshape(out, out.shape[1:]) if single else out


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Same as :func:`conv2d` on channel-last activations (N,H,W,C); kernels stay (O,C,k,k)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[3] or w.shape[2] != w.shape[3]:
        raise _shape_error("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_error("conv2d", w.shape, b.shape)
    n, h, wd, c = x.shape
    o, _, k, _ = w.shape
    s, p = int(stride), int(padding)
    xd = x.data
    if p:
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=xd.dtype)
        xp[:, p : p + h, p : p + wd] = xd
    else:
        xp = xd
    if xp.shape[1] < k or xp.shape[2] < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {xp.shape[1:3]}")
    ho = (xp.shape[1] - k) // s + 1
    wo = (xp.shape[2] - k) // s + 1
    taps = [(i, j) for i in range(k) for j in range(k)]
    cols = np.concatenate([xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] for i, j in taps], axis=3)
    cols = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols @ wmat
    if b is not None:
        out += b.data

    def bw(g):
        g2 = g.reshape(-1, o)
        gw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k * k * c)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for t, (i, j) in enumerate(taps):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[..., t * c : (t + 1) * c]
            gx = dxp[:, p : p + h, p : p + wd] if p else dxp
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out.reshape(n, ho, wo, o), inputs, bw)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization of a channel-last (N,H,W,C) batch using batch statistics.

    Returns the output and the batch mean/variance so callers can keep running averages.
    """
    xd = x.data
    axes = (0, 1, 2)
    mu = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    m = xd.shape[0] * xd.shape[1] * xd.shape[2]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = gd * inv / m * (m * g - gbeta - xhat * gg)
        return gx, gg, gbeta

    return _record("batch_norm", out, (x, gamma, beta), bw), mu, var


# ---------------------------------------------------------------- reductions and norms


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    shape = x.shape

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return _record("mean", np.asarray(x.data.mean(axis=axis)), (x,), bw)


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    return mean(x, axis=(-2, -1))


def spatial_sum(x: Tensor) -> Tensor:
    return sum(x, axis=(-2, -1))


def _scaled_norm(xd: np.ndarray, axis: int) -> np.ndarray:
    """Euclidean norm with keepdims, rescaled by the largest magnitude so tiny or huge entries neither underflow nor overflow."""
    peak = np.abs(xd).max(axis=axis, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    r = xd / safe
    return peak * np.sqrt((r * r).sum(axis=axis, keepdims=True))


def l2norm(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    nrm = np.squeeze(_scaled_norm(xd, axis), axis=axis)

    def bw(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.expand_dims(g / safe * (nrm > 0), axis) * xd,)

    return _record("l2norm", nrm, (x,), bw)


def normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Project onto the unit sphere along ``axis``."""
    xd = x.data
    nrm = _scaled_norm(xd, axis)
    if np.any(nrm == 0):
        raise DomainError("normalize: zero-norm vector")
    u = xd / nrm

    def bw(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / nrm,)

    return _record("normalize", u, (x,), bw)


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != ax):
            raise _shape_error("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", out, tensors, bw)


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing plus integer-array gathering; gradients scatter-add back."""
    shape = x.shape
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", np.array(out, copy=True), (x,), bw)


def take_rows(x: Tensor, rows) -> Tensor:
    return getitem(x, np.asarray(rows, dtype=np.intp))
