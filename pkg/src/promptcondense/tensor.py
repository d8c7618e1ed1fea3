"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor. Each tensor carries a monotonically increasing creation id;
``backward`` collects the nodes reachable from the loss and visits them in
reverse creation order, which is a valid reverse topological order because a
node is always created after its inputs. The tape is released once the
backward pass is done, so a second ``backward`` on the same loss raises.

Broadcasting is deliberately narrow: ``add_bias`` adds a tensor whose shape
matches the trailing dimensions of the other operand, and ``matmul`` accepts
a 2-D right operand against a batched left operand. Everything else needs
exact shape agreement.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ContractError, DimensionError

_ids = itertools.count()
_grad_enabled = True

LN_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense row-major float64 array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float64 array.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._id = next(_ids)
        self._op = "leaf"
        self._released = False

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out._op = op
    out._released = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing block of ``x``; ``b.shape == x.shape[-b.ndim:]``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: bias shape {b.shape} does not match trailing dims of {x.shape}")
    lead = x.ndim - b.ndim

    def backward(g):
        if not b.requires_grad:
            return g, None
        return g, g.sum(axis=tuple(range(lead))) if lead else g

    return _make(x.data + b.data, (x, b), backward, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None), (g * ad if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for i, t in enumerate(tensors):
            if t.requires_grad:
                idx[axis] = slice(bounds[i], bounds[i + 1])
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"slice_axis: [{start}, {stop}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[idx]), (x,), backward, "slice")


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis."""
    data = np.broadcast_to(x.data, (batch,) + x.shape).copy()
    return _make(data, (x,), lambda g: (g.sum(axis=0),), "expand")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the batch axes of ``a``) or has the
    same batch shape as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions of {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = ndtr(xd)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), backward, "gelu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm: feature dimension must be >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gx_hat = g * gd
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate == 0``."""
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy for ``logits`` of shape ``(B, C)``.

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` (scalar) or ``"none"``
    (per-sample losses of shape ``(B,)``).
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expected (B, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if labels.shape[0] != B:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"cross_entropy: label out of range [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(B)
    per = -logp[rows, labels]
    p = np.exp(logp)

    if reduction == "none":
        def backward(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return (d * g[:, None],)

        return _make(per, (logits,), backward, "cross_entropy")

    if reduction not in ("mean", "sum"):
        raise ContractError(f"cross_entropy: unknown reduction {reduction!r}")
    w = 1.0 / B if reduction == "mean" else 1.0

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (w * float(g)),)

    return _make(np.array(per.sum() * w), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays. The recorded tape is
    released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._released:
        raise ContractError("backward: graph for this loss was already consumed; recompute the forward pass")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg

    for t in nodes.values():
        if t._backward is not None:
            t._backward = None
            t._parents = ()
            t._released = True


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The relative error of one element is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``. When ``probes`` is
    given, only that many randomly chosen elements are differenced.
    """
    leaf = Tensor(x.data, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad.reshape(-1)

    flat = leaf.data.reshape(-1).copy()
    idx = np.arange(flat.size)
    if probes is not None and probes < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, size=probes, replace=False))

    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f(Tensor(flat.reshape(x.shape))).item()
            flat[i] = orig - step
            down = f(Tensor(flat.reshape(x.shape))).item()
            flat[i] = orig
            cd = (up - down) / (2.0 * step)
            a = analytic[i]
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, err)
    return worst
