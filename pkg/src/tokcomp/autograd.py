"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (a per-thread stack),
and :meth:`Tape.gradients` replays the recorded adjoints in reverse order.
Outside a tape, the same functions are plain numpy computations, which is what
inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
COSINE_EPS = 1e-8
LAYER_NORM_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops for one forward/backward pass.

    Use as a context manager; ops executed inside the ``with`` block on tensors
    that require gradients are recorded.  A tape belongs to the thread that
    entered it.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))

    def gradients(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``output`` w.r.t. each tensor in ``wrt``.

        Tensors that do not influence ``output`` get an all-zero gradient.
        """
        if output.data.size != 1:
            raise ShapeError(f"gradients() needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product of equal-rank stacks."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim:
        raise ShapeError(f"matmul expects equal-rank operands of rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} x {bd.shape}")

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    return mul(sum_all(x), 1.0 / size)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; the adjoint scatter-adds into repeated rows."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return take_rows(table, ids)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gd
        d = xd.shape[-1]
        gx = inv * (
            gx_hat
            - gx_hat.sum(axis=-1, keepdims=True) / d
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d
        )
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask)


# ---------------------------------------------------------------------------
# similarity and losses
# ---------------------------------------------------------------------------


def pairwise_cosine(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Matrix of cosine similarities between the rows of ``a`` and ``b``.

    Entry ``(i, j)`` is ``a_i . b_j / max(|a_i| |b_j|, eps)``, so zero rows give 0
    and the result is exactly scale invariant otherwise.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[1]:
        raise ShapeError(f"pairwise_cosine expects (m, d) and (k, d), got {ad.shape} and {bd.shape}")
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    num = ad @ bd.T
    prod = np.outer(na, nb)
    clamped = prod < eps
    den = np.where(clamped, eps, prod)
    out = num / den

    def backward(g):
        g_num = g / den
        g_den = np.where(clamped, 0.0, -g * num / (den * den))
        g_na = g_den @ nb
        g_nb = g_den.T @ na
        with np.errstate(divide="ignore", invalid="ignore"):
            unit_a = np.where(na[:, None] > 0, ad / na[:, None], 0.0)
            unit_b = np.where(nb[:, None] > 0, bd / nb[:, None], 0.0)
        ga = g_num @ bd + g_na[:, None] * unit_a
        gb = g_num.T @ ad + g_nb[:, None] * unit_b
        return ga, gb

    return _make(out, (a, b), backward)


def cosine_similarity(u, v, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    d = u.shape[0]
    c = pairwise_cosine(reshape(u, (1, d)), reshape(v, (1, d)), eps)
    return reshape(c, ())


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    loss = -log_p[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero coordinates meaningful."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    seed: int = 0,
    n_coords: int = 20,
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``f`` maps a list of tensors (one per entry of ``params``) to a scalar.
    ``n_coords`` coordinates are sampled without replacement across all
    parameters (all of them if there are fewer).
    """
    params = [np.array(p, dtype=DTYPE) for p in params]
    with Tape() as tape:
        leaves = [Tensor(p, requires_grad=True) for p in params]
        out = f(leaves)
        analytic = tape.gradients(out, leaves)

    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    def value(arrays):
        return float(f([Tensor(a) for a in arrays]).data)

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[k])
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[k].flat[local] += step
        minus[k].flat[local] -= step
        numeric = (value(plus) - value(minus)) / (2.0 * step)
        worst = max(worst, relative_error(float(analytic[k].flat[local]), numeric))
    return worst
