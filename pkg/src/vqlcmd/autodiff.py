"""Dense tensors with tape-based reverse-mode differentiation.

Every operation that touches a ``Tensor`` with ``requires_grad=True`` records
its parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks that tape once in reverse topological order and, by
default, frees it afterwards.

Arrays are float32 unless a different precision is selected with
:func:`precision` (gradient checks run in float64).
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, TokenIndexError

__all__ = [
    "Tensor",
    "no_grad",
    "precision",
    "default_dtype",
    "matmul",
    "softmax_last",
    "log_softmax_last",
    "layer_norm",
    "layer_norm_affine",
    "embedding_lookup",
    "dropout",
    "gelu",
    "silu",
    "grad_check",
    "grad_errors",
]

LN_EPS = 1e-5

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, teacher passes)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other, self.dtype), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def tanh(self):
        return ttanh(self)

    # -- reverse mode ------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(x) into ``x.grad`` for every reachable x.

        ``self`` must hold exactly one element. Gradients add to whatever is
        already stored in ``.grad``; call :meth:`zero_grad` to reset.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        topo = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.data.dtype)
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        if not retain_graph:
            for node in topo:
                node._parents = ()
                node._backward = None


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    # integer powers via multiplication; np.power is very slow on float32
    if p == -1.0:
        out = 1.0 / ad
        return _make(out, (a,), lambda g: (-g * out * out,), "pow")
    if p == 2.0:
        return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "pow")

    def backward(g):
        return (g * p * ad ** (p - 1),)

    return _make(ad**p, (a,), backward, "pow")


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def ttanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(y.astype(x.dtype, copy=False), (a,), backward, "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    y = x * sig

    def backward(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(y, (a,), backward, "silu")


# -- reductions and shape ops ------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # 64-bit accumulation limits drift in long reductions
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    dtype = a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward accumulates ``dA = dC @ B^T`` and ``dB = A^T @ dC``.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): fold leading axes so the weight gradient is one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def backward_folded(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), backward_folded, "matmul")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# -- normalisation -----------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{what}: non-finite input")


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    xd = x.data
    _check_finite(xd, "softmax_last")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def log_softmax_last(x: Tensor) -> Tensor:
    xd = x.data
    _check_finite(xd, "log_softmax_last")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(h: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardisation over the last axis (no affine part)."""
    if h.shape[-1] < 2:
        raise DimensionError(f"layer norm needs width >= 2, got {h.shape[-1]}")
    x = h.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat.astype(x.dtype, copy=False), (h,), backward, "layer_norm")


def layer_norm_affine(h: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    return layer_norm(h, eps) * gain + bias


# -- lookups and noise ---------------------------------------------------------------


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TokenIndexError(f"token ids must be integers, got dtype {ids.dtype}")
    n_rows = table.shape[0]
    bad = (ids < 0) | (ids >= n_rows)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        where = pos[0] if len(pos) == 1 else pos
        raise TokenIndexError(f"token id {int(ids[pos])} at position {where} outside [0, {n_rows - 1}]")
    tshape = table.shape
    dtype = table.dtype

    def backward(g):
        full = np.zeros(tshape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- gradient checking ----------------------------------------------------------------


def grad_errors(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3, points: int = 3
) -> list[float]:
    """Per-parameter max relative error between backprop and central differences.

    ``points`` selects the symmetric stencil: 3 is the classic
    ``(f(x+h) - f(x-h)) / 2h``; 5 adds the ``x +- 2h`` evaluations for a
    fourth-order estimate, which lets a larger ``eps`` keep roundoff small
    without paying for it in truncation error.

    ``f`` is re-evaluated for every perturbed coordinate, so it must be
    deterministic (fix any rng inside it).
    """
    if points not in _STENCILS:
        raise ContractError(f"stencil must have 3 or 5 points, got {points}")
    stencil = _STENCILS[points]
    params = list(params)
    for p in params:
        p.zero_grad()
    root = f()
    if not np.isfinite(root.data).all():
        raise NumericError("grad_check: objective is not finite")
    root.backward()
    errors = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            num = 0.0
            for offset, weight in stencil:
                p.data[idx] = orig + offset * eps
                with no_grad():
                    val = float(f().data)
                if not np.isfinite(val):
                    p.data[idx] = orig
                    raise NumericError("grad_check: objective is not finite under perturbation")
                num += weight * val
            p.data[idx] = orig
            num /= eps
            a = float(analytic[idx])
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
        errors.append(worst)
    return errors


# (offset, weight) pairs; the derivative estimate is sum(weight * f(x + offset * h)) / h
_STENCILS = {
    3: ((1, 0.5), (-1, -0.5)),
    5: ((1, 2.0 / 3.0), (-1, -2.0 / 3.0), (2, -1.0 / 12.0), (-2, 1.0 / 12.0)),
}


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-3, points: int = 3) -> float:
    errs = grad_errors(f, params, eps, points)
    return max(errs) if errs else 0.0
