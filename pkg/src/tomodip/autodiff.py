"""Small reverse-mode automatic differentiation engine on top of numpy.

Every differentiable function returns a :class:`Tensor` that remembers its
inputs and a closure computing the vector-Jacobian product.  Calling
:func:`backward` on a scalar collects the reachable nodes into a
:class:`Graph` (ordered by creation, which is a topological order) and
sweeps it once in reverse.

All values are stored as float64.  Ops raise :class:`NonFiniteError` as soon
as a NaN or Inf appears instead of propagating it silently.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Graph",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "tensor_sum",
    "mse_sum",
    "leaky_relu",
    "sigmoid",
    "pad2d",
    "conv2d",
    "reshape",
    "upsample_nearest",
    "concat",
    "linear_map",
    "AdamState",
    "adam_init",
    "adam_step",
]

_node_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` get a zero-filled ``grad``
    buffer that :func:`backward` accumulates into.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple["Tensor", ...] = (), _vjp: Callable | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if op == "leaf" else data
        _check_finite(arr, op)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = _parents
        self._vjp = _vjp
        self._id = next(_node_ids)
        self.grad: np.ndarray | None = (
            np.zeros_like(arr) if (requires_grad and not _parents) else None
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap an op output; only keep graph links when some input needs a gradient."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data, False, op=op)


@dataclass
class Graph:
    """Nodes reachable from a root, in creation (= topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> Graph:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    graph = Graph.from_root(root)
    if not graph.nodes:
        return graph
    pending: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg
    return graph


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def tensor_sum(a: Tensor) -> Tensor:
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def mse_sum(a: Tensor, b: Tensor | np.ndarray) -> Tensor:
    """Sum of squared differences ``sum((a - b)**2)``."""
    b = _as_tensor(b)
    _same_shape(a, b, "mse_sum")
    d = a.data - b.data
    out = np.array(np.dot(d.ravel(), d.ravel()))
    return _record(out, (a, b), lambda g: (2.0 * g * d, -2.0 * g * d), "mse_sum")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky_relu slope must lie in (0, 1)")
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)
    return _record(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ---------------------------------------------------------------------------
# image ops; tensors are (C, H, W) or batched (B, C, H, W)
# ---------------------------------------------------------------------------

def _pad_matrix(n: int, p: int, mode: str) -> np.ndarray:
    """(n + 2p) x n selection matrix realising the padding along one axis."""
    m = np.zeros((n + 2 * p, n))
    for j in range(n + 2 * p):
        i = j - p
        if mode == "reflection":
            if n == 1:
                i = 0
            while i < 0 or i >= n:
                i = -i if i < 0 else 2 * (n - 1) - i
            m[j, i] = 1.0
        elif 0 <= i < n:
            m[j, i] = 1.0
    return m


def pad2d(x: Tensor, p: int, mode: str = "reflection") -> Tensor:
    """Pad the last two axes by ``p`` on each side (reflection or zero)."""
    if mode not in ("reflection", "zero"):
        raise ValueError(f"unknown pad mode {mode!r}")
    if p == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "reflection" and (p >= h or p >= w) and min(h, w) > 1:
        raise ValueError("reflection padding must be smaller than the image")
    rh, rw = _pad_matrix(h, p, mode), _pad_matrix(w, p, mode)
    out = rh @ x.data @ rw.T
    return _record(out, (x,), lambda g: (rh.T @ g @ rw,), f"pad2d[{mode}]")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad_mode: str = "reflection") -> Tensor:
    """Cross-correlation with 'same'-style padding ``(k - 1) // 2``.

    Output extents are ``ceil(H / stride)`` and ``ceil(W / stride)``.
    """
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects input (C,H,W)/(B,C,H,W) and kernel (Co,Ci,k,k)")
    co, ci, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if x.shape[1] != ci:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {ci}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if bias is not None and bias.shape != (co,):
        raise ValueError("bias must have shape (C_out,)")
    k = kh
    xp = pad2d(x, (k - 1) // 2, pad_mode)
    b = xp.shape[0]
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    # im2col in (Ci, k, k, B, Ho, Wo) layout so both products are plain matmuls
    cols = np.empty((ci, k, k, b, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp.data[:, :, i:i + stride * ho:stride,
                                    j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(ci * k * k, -1)
    wmat = weight.data.reshape(co, -1)
    out_t = (wmat @ cols2).reshape(co, b, ho, wo)
    if bias is not None:
        out_t += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out_t.transpose(1, 0, 2, 3))
    pshape = xp.shape

    def vjp(g):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        gb = g_t.sum(axis=1) if bias is not None and bias.requires_grad else None
        gw = (g_t @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if xp.requires_grad:
            gcol = (wmat.T @ g_t).reshape(ci, k, k, b, ho, wo)
            gx_t = np.zeros((ci, b) + pshape[2:])
            for i in range(k):
                for j in range(k):
                    gx_t[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[:, i, j]
            gx = gx_t.transpose(1, 0, 2, 3)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (xp, weight, bias) if bias is not None else (xp, weight)
    y = _record(out, parents, vjp, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel ``factor x factor`` times along the last two axes."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return x
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]

    def vjp(g):
        return (g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return _record(out, (x,), vjp, "upsample_nearest")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), vjp, "concat")


def linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
               adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linear_map") -> Tensor:
    """Apply a linear operator given as a forward/adjoint function pair."""
    return _record(np.asarray(forward(x.data), dtype=np.float64), (x,),
                   lambda g: (adjoint(g),), name)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> AdamState:
    return AdamState(
        {k: np.zeros_like(v) for k, v in params.items()},
        {k: np.zeros_like(v) for k, v in params.items()},
        0, lr, beta1, beta2, eps_adam,
    )


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise ValueError("adam_step: parameter, gradient and moment names differ")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for {name!r}")
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * (g * g)
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps_adam)

