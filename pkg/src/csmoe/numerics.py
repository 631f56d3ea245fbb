"""Dense tensors with reverse-mode gradients, named RNG streams and a
finite-difference gradient checker.

Every operation returns a new :class:`Tensor`; a non-finite result is a hard
error.  Log-domain code uses :data:`NEG` as a finite stand-in for log(0).
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

NEG = -1.0e30

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.generic):
        # 0-d arithmetic yields NumPy scalars; keep their precision
        data = np.asarray(data)
    if isinstance(data, np.ndarray):
        if dtype is not None and data.dtype != dtype:
            return data.astype(dtype)
        if data.dtype.kind != "f":
            return data.astype(np.float64)
        return data
    return np.asarray(data, dtype=dtype or np.float64)


class Tensor:
    """An n-d real array that remembers how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(out: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    t._op = op
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _scalar_or_tensor(a, b):
    # Python scalars stay scalars so float32 arithmetic stays float32.
    # NumPy scalars such as np.float64 subclass float but would promote, so
    # they are turned back into plain Python numbers first.
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return a, (int(b) if isinstance(b, int) else float(b)), True
    return a, _wrap(b), False


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b, scalar = _scalar_or_tensor(a, b)
    if scalar:
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)
    a, b, scalar = _scalar_or_tensor(a, b)
    if scalar:
        return _make(a.data - b, (a,), lambda g: (g,), "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b, scalar = _scalar_or_tensor(a, b)
    if scalar:
        return _make(a.data * b, (a,), lambda g: (g * b,), "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a = _wrap(a)
    a, b, scalar = _scalar_or_tensor(a, b)
    if scalar:
        return _make(a.data / b, (a,), lambda g: (g / b,), "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * pos,), "relu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                            _unbroadcast(np.where(cond, 0, g), sb)), "where")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by the constant ``value``."""
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    keep = ~mask
    shape = x.shape
    return _make(out, (x,), lambda g: (_unbroadcast(g * keep, shape),), "masked_fill")


# -- reductions and shapes ---------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    n = len(xs)
    return _make(np.stack([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


# -- normalisers -----------------------------------------------------------------
def logsumexp_t(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    s = np.exp(xd - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(xd - out_k),)

    return _make(out, (x,), bw, "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# -- plain-float helpers -----------------------------------------------------------
def logsumexp(xs: Iterable[float]) -> float:
    """Shift-stable log(sum(exp(xs))) over a non-empty list of reals."""
    xs = list(xs)
    if not xs:
        raise ValueError("empty logsumexp")
    if len(xs) == 1:
        return float(xs[0])
    m = max(xs)
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    if b == -math.inf or b <= NEG:
        return a
    return a + math.log1p(math.exp(b - a))


def softmax_rows(m) -> Tensor:
    """Row-wise softmax of a 2-d matrix (differentiable when given a Tensor)."""
    m = _wrap(m)
    if m.ndim != 2:
        raise ValueError("softmax_rows expects a 2-d matrix")
    _check_finite(m.data, "softmax_rows input")
    return softmax(m, axis=1)


# -- RNG ----------------------------------------------------------------------------
def rng_stream(seed: int, *names) -> np.random.Generator:
    """Philox (counter-based) generator keyed by a seed and a path of names.

    The same ``(seed, names)`` always yields the same stream, independent of
    how many other streams were drawn before it.
    """
    key = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    key += [zlib.crc32(str(n).encode("utf-8")) for n in names]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


# -- gradient checking ----------------------------------------------------------------
@dataclass
class GradReport:
    per_param: dict[str, float]
    max_rel_error: float
    epsilon: float
    tolerance: float
    worst: tuple[str, int] | None = None
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               epsilon: float = 1e-6, tolerance: float = 1e-4,
               perturbed: Callable[[str, np.ndarray], np.ndarray] | None = None,
               chunk: int = 256) -> GradReport:
    """Compare reverse-mode gradients with central differences, element by element.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``perturbed(name, stacked)`` optionally evaluates many single-element
    perturbations at once: ``stacked`` is ``[K, *shape]`` holding K copies of
    parameter ``name`` and the callable returns the K losses.  Each copy still
    differs from the base parameter in exactly one element.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    with no_grad():
        again = loss_fn().data
    if not np.array_equal(loss.data, again):
        raise RuntimeError("loss_fn is not deterministic")
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.grad = None

    per_param: dict[str, float] = {}
    worst_err, worst = 0.0, None
    with no_grad():
        for name, p in params.items():
            numeric = (_batched_differences(name, p.data, perturbed, epsilon, chunk) if perturbed
                       else _serial_differences(loss_fn, p.data, epsilon))
            a = analytic[name].reshape(-1).astype(np.float64)
            err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            i = int(np.argmax(err)) if err.size else 0
            per_param[name] = float(err[i]) if err.size else 0.0
            if per_param[name] > worst_err:
                worst_err, worst = per_param[name], (name, i)
    return GradReport(per_param, worst_err, epsilon, tolerance, worst)


def _serial_differences(loss_fn, data: np.ndarray, epsilon: float) -> np.ndarray:
    flat = data.reshape(-1)
    if not np.shares_memory(flat, data):
        raise ValueError("grad_check needs contiguous parameter arrays")
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = loss_fn().data
        flat[i] = orig - epsilon
        fm = loss_fn().data
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * epsilon)
    return out


def _batched_differences(name: str, data: np.ndarray, perturbed, epsilon: float, chunk: int) -> np.ndarray:
    n = data.size
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        orig = data.reshape(-1)[idx]
        rows = np.arange(len(idx))
        shape = (len(idx), *data.shape)
        stacked = np.repeat(data.reshape(1, -1), len(idx), axis=0)
        stacked[rows, idx] = orig + epsilon
        fp = np.asarray(perturbed(name, stacked.reshape(shape)))
        stacked[rows, idx] = orig - epsilon
        fm = np.asarray(perturbed(name, stacked.reshape(shape)))
        # difference in the evaluation precision, before narrowing to float64
        out[idx] = (fp - fm) / (2.0 * epsilon)
    return out
