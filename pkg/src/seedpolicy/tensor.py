"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 or float64) and record the
operations that produced them. Calling :func:`backward` on a scalar loss
walks the recorded graph once, in reverse topological order, and returns
gradients for a :class:`ParamSet`. A finite-difference oracle
(:func:`grad_check`) verifies every analytic gradient independently.

All forward computation is deterministic: the same inputs produce bitwise
identical outputs, and the accumulation order during backward is fixed by
the graph construction order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "DimensionError",
    "ContractError",
    "DeterminismError",
    "NonFiniteError",
    "no_grad",
    "matmul",
    "linear",
    "softmax_rows",
    "sigmoid",
    "gelu",
    "layer_norm",
    "reshape",
    "transpose",
    "stack",
    "concat",
    "take_index",
    "matmul_scaled_t",
    "linear_split_heads",
    "merge_heads_linear",
    "backward",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class DeterminismError(RuntimeError):
    """Two evaluations of a supposedly deterministic function disagreed."""


class NonFiniteError(FloatingPointError):
    """A tensor contains NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """n-dimensional numeric array participating in reverse-mode autodiff.

    ``data`` is the row-major value array, ``grad`` (populated by
    :func:`backward` for leaves) has the same shape, and ``requires_grad``
    marks trainable leaves. Tensors created inside a recorded graph are
    treated as immutable; parameters are mutated in place only between
    training steps, never while a graph referencing them is alive.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def _from_op(cls, arr: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")
        return self

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._vjp = None
        return t

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # ------------------------------------------------------------------
    # elementwise arithmetic (broadcasting allowed; gradients un-broadcast)

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data + b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data - b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data * b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            ),
        )

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------------
    # shape ops and reductions as methods

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        in_shape = a.data.shape

        def vjp(g):
            return (_spread(g, in_shape, axis, keepdims),)

        return Tensor._from_op(np.asarray(out), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.mean(axis=axis, keepdims=keepdims)
        in_shape = a.data.shape
        count = a.data.size if axis is None else _axis_count(in_shape, axis)

        def vjp(g):
            return (_spread(g, in_shape, axis, keepdims) / np.asarray(count, dtype=a.data.dtype),)

        return Tensor._from_op(np.asarray(out), (a,), vjp)

    def square(self) -> "Tensor":
        a = self
        return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._from_op(out, (a,), lambda g: (g * out,))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return Tensor._from_op(out, (a,), lambda g: (g * (0.5 / out),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def _spread(g: np.ndarray, in_shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        if isinstance(axis, int):
            axis = (axis,)
        axis = tuple(ax % len(in_shape) for ax in axis)
        shape = tuple(1 if i in axis else s for i, s in enumerate(in_shape))
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


# ----------------------------------------------------------------------
# free-function operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` fused into one graph node.

    ``x`` is (..., n, d_in), ``w`` is (d_in, d_out), ``b`` is (d_out,).
    """
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.data.shape[-1]).T @ g2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return Tensor._from_op(out, (x, w, b), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max-subtraction.

    Each output row sums to 1 and the result is invariant to adding a
    constant to a row (exactly, whenever the shift itself is exact in
    floating point, because the shifted values cancel in ``x - max``).
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, overflow-safe for large |x|."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU activation (tanh form), GELU(0) = 0.

    The backward pass reuses the forward tanh value, so each call costs a
    single transcendental.
    """
    d = x.data
    x2 = d * d
    th = np.tanh(_GELU_C * d * (1.0 + _GELU_A * x2))
    out = 0.5 * d * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th * th) * du),)

    return Tensor._from_op(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.data.shape[-1] != gain.data.shape[-1] or x.data.shape[-1] != bias.data.shape[-1]:
        raise DimensionError("layer_norm: gain/bias width must match last axis")
    d = x.data
    width = d.shape[-1]
    inv_w = np.asarray(1.0 / width, dtype=d.dtype)
    mu = np.add.reduce(d, axis=-1, keepdims=True) * inv_w
    xc = d - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_w
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=d.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = np.add.reduce(dxhat, axis=-1, keepdims=True) * inv_w
        m2 = np.add.reduce(dxhat * xhat, axis=-1, keepdims=True) * inv_w
        gx = inv * (dxhat - m1 - xhat * m2)
        ggain = (g * xhat).reshape(-1, width).sum(axis=0)
        gbias = g.reshape(-1, width).sum(axis=0)
        return gx, ggain, gbias

    return Tensor._from_op(out, (x, gain, bias), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = x.data.shape
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return Tensor._from_op(out, (x,), lambda g: (g.transpose(inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        parts = np.split(g, len(ts), axis=axis)
        return tuple(p.squeeze(axis=axis) for p in parts)

    return Tensor._from_op(out, ts, vjp)


def matmul_scaled_t(a: Tensor, b: Tensor, scale: float) -> Tensor:
    """Fused ``(a @ b^T) * scale`` over the last two axes (attention scores)."""
    if a.data.shape[-1] != b.data.shape[-1]:
        raise DimensionError(f"matmul_scaled_t inner dims differ: {a.shape} vs {b.shape}")
    s = np.asarray(scale, dtype=a.data.dtype)
    out = (a.data @ b.data.swapaxes(-1, -2)) * s

    def vjp(g):
        gs = g * s
        ga = _unbroadcast(gs @ b.data, a.data.shape)
        gb = _unbroadcast(gs.swapaxes(-1, -2) @ a.data, b.data.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def linear_split_heads(x: Tensor, w: Tensor, b: Tensor | None, heads: int) -> Tensor:
    """Fused projection + head split: (..., n, D_in) -> (..., H, n, d_k).

    ``b`` may be None for a bias-free projection (used for attention keys,
    where a bias would shift every logit row by a constant that softmax
    cancels exactly).
    """
    if x.data.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"linear_split_heads: width {x.shape[-1]} != rows {w.shape[0]}")
    d_out = w.data.shape[1]
    if d_out % heads != 0:
        raise DimensionError(f"output width {d_out} not divisible by {heads} heads")
    proj = x.data @ w.data
    if b is not None:
        proj = proj + b.data
    *lead, n, _ = proj.shape
    out = proj.reshape(*lead, n, heads, d_out // heads).swapaxes(-3, -2)

    def vjp(g):
        gp = g.swapaxes(-3, -2).reshape(*lead, n, d_out)
        g2 = gp.reshape(-1, d_out)
        gx = gp @ w.data.T
        gw = x.data.reshape(-1, x.data.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, vjp)


def merge_heads_linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused head merge + output projection: (..., H, n, d_k) -> (..., n, D_out)."""
    *lead, h, n, dk = x.data.shape
    merged = x.data.swapaxes(-3, -2).reshape(*lead, n, h * dk)
    if merged.shape[-1] != w.data.shape[0]:
        raise DimensionError(f"merge_heads_linear: width {merged.shape[-1]} != rows {w.data.shape[0]}")
    out = merged @ w.data + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gm = g @ w.data.T
        gx = gm.reshape(*lead, n, h, dk).swapaxes(-3, -2)
        gw = merged.reshape(-1, h * dk).T @ g2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return Tensor._from_op(out, (x, w, b), vjp)


def take_index(x: Tensor, idx: int, axis: int) -> Tensor:
    """Select one slice along an axis (inspection/tests; not a hot path)."""
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(x.data)
        sl: list = [slice(None)] * x.data.ndim
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return Tensor._from_op(out, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(tensors)
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, ts, vjp)


# ----------------------------------------------------------------------
# parameters and backward pass


class ParamSet:
    """Named map from dot-separated parameter paths to trainable tensors.

    Paths are unique and iteration is always lexicographic, so every
    consumer (optimizer, checkpointing, gradient checking) sees the same
    deterministic order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        tensor.requires_grad = True
        self._params[path] = tensor
        return tensor

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(p, self._params[p]) for p in self.paths()]

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.paths())

    def subset(self, prefix: str) -> "ParamSet":
        sub = ParamSet()
        dotted = prefix if prefix.endswith(".") else prefix + "."
        for path, t in self.items():
            if path == prefix or path.startswith(dotted):
                sub._params[path] = t
        return sub

    def num_scalars(self) -> int:
        return sum(t.size for t in self._params.values())


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS topological order; parents visited in recorded order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParamSet) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar loss for every parameter.

    Parameters that the loss does not depend on receive exact zero
    gradients. The returned map mirrors the parameter layout; each
    parameter's ``grad`` field is also populated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._vjp is not None or loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None and not node._parents:
                    grads[id(node)] = g  # leaf: keep for collection below
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    grads[id(p)] = pg
                else:
                    grads[id(p)] = acc + pg
    result: dict[str, Tensor] = {}
    for path, p in params.items():
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        result[path] = Tensor(g)
    return result


def grad_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must be deterministic; it is evaluated twice up front and a
    :class:`DeterminismError` is raised if the two values differ bitwise.
    The relative error for each parameter scalar is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    v1 = f(params).data.copy()
    v2 = f(params).data.copy()
    if not np.array_equal(v1, v2):
        raise DeterminismError("f returned different values on repeated evaluation")

    loss = f(params)
    analytic = backward(loss, params)

    worst = 0.0
    for path, p in params.items():
        a = analytic[path].data
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(params).item()
            flat[i] = orig - step
            down = f(params).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            an = float(a.reshape(-1)[i])
            denom = max(abs(an), abs(numeric), 1e-12)
            err = abs(an - numeric) / denom
            if err > worst:
                worst = err
    return worst
