"""Reverse-mode automatic differentiation on dense numpy arrays.

A dynamic tape: every operation on :class:`Tensor` records its parents and a
vector-Jacobian product, and ``backward()`` on a scalar walks the tape once in
reverse topological order.  Dense row-major storage only; float32 for training,
float64 for gradient checks.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


_finite_checks = True


@contextmanager
def no_finite_checks():
    """Disable per-op NaN/Inf validation (used inside hot training loops)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = False
    try:
        yield
    finally:
        _finite_checks = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus the tape bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- tape -------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar, filling ``.grad`` on the tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar output, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse-topological order of the tape reachable from ``root``."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic (broadcasting) ---------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a)
    data = a.data / b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes are broadcast batch dimensions."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared right operand (weight matrix): one flat GEMM instead of a
        # batched product, and a rank-2 gradient without the huge interposer
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def vjp_shared(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(data, (a, b), vjp_shared)

    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)
    return _make(data, (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape)
    return _make(np.ascontiguousarray(data), (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Row-select along ``axis`` (gather); backward scatter-adds."""
    idx = np.asarray(indices)
    data = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * (axis % x.ndim) + (idx,), g)
        return (gx,)

    return _make(data, (x,), vjp)


def diag_part(x: Tensor) -> Tensor:
    """Diagonal slices of a (B, N, N, D) tensor -> (B, N, D)."""
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise ShapeError(f"diag_part expects (B, N, N, D), got {x.shape}")
    n = x.shape[1]
    r = np.arange(n)
    data = x.data[:, r, r, :]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, r, r, :] = g
        return (gx,)

    return _make(data, (x,), vjp)


def sort_descending(x: Tensor, axis: int = -1) -> Tensor:
    """Sort values in descending order; ties keep original order (stable)."""
    idx = np.argsort(-x.data, axis=axis, kind="stable")
    data = np.take_along_axis(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _make(data, (x,), vjp)


# -- reductions --------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def masked_sum(x: Tensor, mask: np.ndarray, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over entries where ``mask`` (a constant 0/1 array) is set."""
    return sum_(mul(x, Tensor(mask.astype(x.dtype))), axis=axis, keepdims=keepdims)


def masked_mean(x: Tensor, mask: np.ndarray, axis=None, keepdims: bool = False) -> Tensor:
    m = mask.astype(x.dtype)
    denom = m.sum(axis=axis, keepdims=keepdims)
    if np.any(denom == 0):
        raise ShapeError("masked_mean over empty mask")
    return div(masked_sum(x, mask, axis=axis, keepdims=keepdims), Tensor(denom))


# -- nonlinearities -----------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    return _make(data, (x,), lambda g: (g * (data > 0),))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(x.data)
    return _make(data, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)
    return _make(data, (x,), lambda g: (g * (0.5 / data),))


def abs_(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    return _make(data, (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    data = expit(x.data)
    return _make(data, (x,), lambda g: (g * data * (1.0 - data),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    data = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)
    return _make(data, (x,), lambda g: (g * expit(x.data),))


def softmax(x: Tensor, axis: int = -1, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; ``additive_mask`` (constant) is added to the logits.

    Masked-out slots should carry a large negative value in the mask.  A row
    that is entirely masked degrades to a uniform row rather than NaN.
    """
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def vjp(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm gain/bias must match the last axis of x")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.einsum("...k,...k->...", xc, xc) / d
    inv = 1.0 / np.sqrt(var + eps)[..., None]
    xh = xc
    xh *= inv  # xc buffer reused; only xh is needed downstream
    data = xh * gain.data
    data += bias.data

    def vjp(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (np.einsum("...k,...k->...", gh, xh) / d)[..., None]
        gx = inv * (gh - m1 - xh * m2)
        flat = x.ndim - 1
        ggain = np.einsum("nk,nk->k", g.reshape(-1, d), xh.reshape(-1, d)) if flat else g * xh
        gbias = g.reshape(-1, d).sum(axis=0) if flat else g.copy()
        return gx, ggain, gbias

    return _make(data, (x, gain, bias), vjp)


# -- op registry ---------------------------------------------------------------

#: name -> (input sampler, op).  The sampler returns float64 test points placed
#: away from non-differentiable kinks (relu/abs at 0, sort ties); the op maps
#: Tensors to a Tensor of any shape and is reduced to a scalar by the gradient
#: checker through a fixed random projection.
OP_REGISTRY: dict[str, tuple[Callable, Callable]] = {}


def _register(name, sampler, op):
    OP_REGISTRY[name] = (sampler, op)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * gap


_register("add", lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], add)
_register("add_broadcast", lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((4,))], add)
_register("sub", lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], sub)
_register("mul", lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], mul)
_register(
    "div",
    lambda rng: [rng.standard_normal((3, 4)), _away_from_zero(rng, (3, 4), 0.5)],
    div,
)
_register("scalar_mul", lambda rng: [rng.standard_normal((3, 4))], lambda x: mul(x, 1.7))
_register("scalar_div", lambda rng: [rng.standard_normal((3, 4))], lambda x: div(x, 2.3))
_register("matmul", lambda rng: [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], matmul)
_register(
    "matmul_batched",
    lambda rng: [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))],
    matmul,
)
_register(
    "concat",
    lambda rng: [rng.standard_normal((3, 2)), rng.standard_normal((3, 3))],
    lambda a, b: concat([a, b], axis=-1),
)
_register(
    "softmax",
    lambda rng: [rng.standard_normal((4, 4))],
    lambda x: softmax(x, axis=-1),
)
_register(
    "softmax_masked",
    lambda rng: [rng.standard_normal((4, 4))],
    lambda x: softmax(x, axis=-1, additive_mask=np.array([0.0, 0.0, -1e9, 0.0])),
)
_register("log_softmax", lambda rng: [rng.standard_normal((4, 4))], log_softmax)
_register("relu", lambda rng: [_away_from_zero(rng, (3, 4))], relu)
_register("exp", lambda rng: [rng.standard_normal((3, 4))], exp)
_register("log", lambda rng: [np.exp(rng.standard_normal((3, 4)))], log)
_register("sqrt", lambda rng: [np.exp(rng.standard_normal((3, 4))) + 0.1], sqrt)
_register("abs", lambda rng: [_away_from_zero(rng, (3, 4))], abs_)
_register("sigmoid", lambda rng: [rng.standard_normal((3, 4))], sigmoid)
_register("softplus", lambda rng: [rng.standard_normal((3, 4))], softplus)
_register("sum", lambda rng: [rng.standard_normal((3, 4))], lambda x: sum_(x, axis=None))
_register("sum_axis", lambda rng: [rng.standard_normal((3, 4))], lambda x: sum_(x, axis=0))
_register("mean", lambda rng: [rng.standard_normal((3, 4))], lambda x: mean(x, axis=1))
_register(
    "masked_sum",
    lambda rng: [rng.standard_normal((3, 4))],
    lambda x: masked_sum(x, np.array([1.0, 0.0, 1.0, 1.0]), axis=-1),
)
_register(
    "masked_mean",
    lambda rng: [rng.standard_normal((3, 4))],
    lambda x: masked_mean(x, np.array([1.0, 0.0, 1.0, 1.0]), axis=-1),
)
_register("transpose", lambda rng: [rng.standard_normal((2, 3, 4))], lambda x: transpose(x, (2, 0, 1)))
_register("reshape", lambda rng: [rng.standard_normal((3, 4))], lambda x: reshape(x, (2, 6)))
_register("broadcast_to", lambda rng: [rng.standard_normal((1, 4))], lambda x: broadcast_to(x, (3, 4)))
_register("take", lambda rng: [rng.standard_normal((5, 3))], lambda x: take(x, np.array([0, 2, 2, 4]), axis=0))
_register("diag_part", lambda rng: [rng.standard_normal((2, 3, 3, 4))], diag_part)
_register(
    "sort_descending",
    lambda rng: [rng.permutation(np.linspace(-2.0, 2.0, 12)).reshape(3, 4)],
    sort_descending,
)
_register(
    "layer_norm",
    lambda rng: [rng.standard_normal((3, 5)), rng.standard_normal(5) + 1.5, rng.standard_normal(5)],
    layer_norm,
)


def check_registered_op(name: str, seed: int = 0, h: float | None = None) -> float:
    """Finite-difference check one registry entry; returns max relative error."""
    sampler, op = OP_REGISTRY[name]
    rng = np.random.default_rng(seed)
    points = [np.asarray(p, dtype=np.float64) for p in sampler(rng)]
    probe = op(*[Tensor(p) for p in points])
    proj = np.random.default_rng(seed + 1).standard_normal(probe.shape)

    def scalar_fn(*ts):
        return sum_(mul(op(*ts), Tensor(proj)))

    return finite_difference_check(scalar_fn, points, h=h)


# -- gradient helpers ---------------------------------------------------------


def gradient(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Run backward from a scalar ``output`` and return grads for ``wrt``.

    Raises if any requested leaf does not require gradients or was not
    reached by the tape.
    """
    for t in wrt:
        if not t.requires_grad:
            raise ValueError("gradient requested w.r.t. a tensor with requires_grad=False")
    output.backward()
    grads = []
    for t in wrt:
        grads.append(t.grad if t.grad is not None else np.zeros_like(t.data))
    return grads


def finite_difference_check(fn, points: Sequence[np.ndarray], h: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps len(points) Tensors to a scalar Tensor.  Step size defaults to
    ``1e-6 * max(1, |x|)`` per coordinate at float64.  The relative error for
    each coordinate is ``|analytic - fd| / (|analytic| + 1e-12)``.
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    leaves = [Tensor(p, requires_grad=True) for p in points]
    out = fn(*leaves)
    if out.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued fn")
    analytic = gradient(out, leaves)
    worst = 0.0
    for k, p in enumerate(points):
        flat = p.ravel()
        for i in range(flat.size):
            step = h if h is not None else 1e-6 * max(1.0, abs(flat[i]))
            plus = flat.copy()
            plus[i] += step
            minus = flat.copy()
            minus[i] -= step
            args_p = [pp.copy() for pp in points]
            args_m = [pp.copy() for pp in points]
            args_p[k] = plus.reshape(p.shape)
            args_m[k] = minus.reshape(p.shape)
            fp = float(fn(*[Tensor(a) for a in args_p]).data)
            fm = float(fn(*[Tensor(a) for a in args_m]).data)
            fd = (fp - fm) / (2.0 * step)
            a = analytic[k].ravel()[i]
            err = abs(a - fd) / (abs(a) + 1e-12)
            if not np.isfinite(err):
                raise NonFiniteError("finite-difference probe produced non-finite values")
            worst = max(worst, err)
    return worst
