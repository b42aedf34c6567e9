"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient. Without an active tape the same functions run as plain
numpy code, which is what inference uses.

    with Tape():
        loss = masked_mae(linear(x, w, b), y, mask)
    grads = backward(loss)
"""

from __future__ import annotations

import contextvars
import zlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError, TapeError

_ACTIVE = contextvars.ContextVar("mdam_active_tape", default=None)


class Tape:
    """Ordered record of ``(inputs, output, backward_rule)`` triples."""

    def __init__(self):
        self.records = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        # float64 throughout; extended precision is kept only for the gradient-check oracle
        if arr.dtype != np.float64 and arr.dtype != np.longdouble:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs, rule) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((inputs, out, rule))
    return out


def _check_elementwise(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# Elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), rule)


hadamard = mul


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


# Linear algebra ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, n]``; ``b`` must be a matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))
    ashape, bd = a.shape, b.data

    def rule(g):
        g2 = g.reshape(-1, n)
        return (g2 @ bd.T).reshape(ashape), a2.T @ g2

    return _record(out, (a, b), rule)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (n,))
    xshape, wd = x.shape, w.data

    def rule(g):
        g2 = g.reshape(-1, n)
        return (g2 @ wd.T).reshape(xshape), x2.T @ g2, g2.sum(axis=0)

    return _record(out, (x, w, b), rule)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(np.dot(ad, bd), (a, b), lambda g: (g * bd, g * ad))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _record(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape),))


# Shape manipulation ------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis=-1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, parts, rule)


def take(x, start, stop) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record(x.data[..., start:stop], (x,), rule)


def stack(parts: Sequence[Tensor], axis=0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("stack: no inputs")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {[p.shape for p in parts]}")
    out = np.stack([p.data for p in parts], axis=axis)
    n = len(parts)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(out, parts, rule)


def masked_fill(x, keep, value) -> Tensor:
    """Entries where ``keep`` is False are replaced by the constant ``value``."""
    x = as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        keep = np.broadcast_to(keep, x.shape)
    return _record(np.where(keep, x.data, value), (x,), lambda g: (np.where(keep, g, 0.0),))


# Attention pieces --------------------------------------------------------------

def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty input of shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record(y, (x,), rule)


def attention_scores(query, keys) -> Tensor:
    """Dot products ``query[..., H]`` against each row of ``keys[..., S, H]`` -> ``[..., S]``."""
    query, keys = as_tensor(query), as_tensor(keys)
    if keys.ndim != query.ndim + 1 or keys.shape[:-2] != query.shape[:-1] \
            or keys.shape[-1] != query.shape[-1]:
        raise ShapeError(f"attention_scores: incompatible shapes {query.shape} and {keys.shape}")
    q, k = query.data, keys.data
    out = np.einsum("...h,...sh->...s", q, k)

    def rule(g):
        return np.einsum("...s,...sh->...h", g, k), g[..., :, None] * q[..., None, :]

    return _record(out, (query, keys), rule)


def weighted_sum(weights, values) -> Tensor:
    """``sum_s weights[..., s] * values[..., s, :]``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if values.ndim != weights.ndim + 1 or values.shape[:-1] != weights.shape:
        raise ShapeError(f"weighted_sum: incompatible shapes {weights.shape} and {values.shape}")
    w, v = weights.data, values.data
    out = np.einsum("...s,...sh->...h", w, v)

    def rule(g):
        return np.einsum("...h,...sh->...s", g, v), w[..., :, None] * g[..., None, :]

    return _record(out, (weights, values), rule)


# Regularisation and loss -------------------------------------------------------

def dropout(x, rate, rng: np.random.Generator | None = None, training=True) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


class EmptyLossError(DataError):
    pass


def masked_mae(pred, target, mask) -> Tensor:
    """Mean of ``|pred - target|`` over entries where ``mask`` is set."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"masked_mae: incompatible shapes {pred.shape} and {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise ShapeError(f"masked_mae: mask shape {mask.shape} vs {pred.shape}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("masked_mae: mask selects no entries")
    diff = pred.data - target.data
    value = np.sum(np.abs(diff) * mask) / count
    sgn = np.sign(diff) * mask / count

    def rule(g):
        return g * sgn, -g * sgn

    return _record(value, (pred, target), rule)


# Backward pass -----------------------------------------------------------------

def backward(loss: Tensor) -> dict:
    """Run the reverse sweep; returns ``{leaf tensor: gradient array}``.

    Leaf gradients are also stored on ``tensor.grad``. A tape supports a single
    backward pass.
    """
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not attached to a live tape")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for inputs, out, rule in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            if t._tape is None:
                leaves[k] = t
            prev = pending.get(k)
            pending[k] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.records = []
    grads = {}
    for k, t in leaves.items():
        g = np.array(pending[k], dtype=np.float64).reshape(t.shape)
        t.grad = g
        grads[t] = g
    return grads


def gradient_bytes(grads: dict, order: Sequence[Tensor]) -> bytes:
    return b"".join(grads[p].tobytes() for p in order)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon=1e-5,
               extended=True) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and return a scalar tensor built from ``params``.
    Relative error per entry is ``|a - n| / max(1e-8, |a| + |n|)``. Analytic
    gradients come from a float64 backward pass; with ``extended`` the
    finite-difference evaluations run in ``np.longdouble`` so their roundoff
    (about ``eps_mach * |f| / epsilon``) stays well below the 1e-8 floor.
    """
    with Tape():
        loss = f()
    if not np.isfinite(loss.item()):
        raise NumericError("grad_check: non-finite loss")
    grads = backward(loss)
    dtype = np.longdouble if extended else np.float64
    eps = dtype(epsilon)
    saved = [p.data for p in params]
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(dtype)
        for p in params:
            analytic = grads.get(p, np.zeros(p.shape)).reshape(-1)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().data
                flat[i] = orig - eps
                fm = f().data
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: non-finite loss under perturbation")
                numeric = float((fp - fm) / (2 * eps))
                a = float(analytic[i])
                worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
    finally:
        for p, d in zip(params, saved):
            p.data = d
    return worst


# Seeded randomness -------------------------------------------------------------

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed, *keys) -> np.random.Generator:
    """Counter-based (Philox) stream for ``seed`` split by ``keys``.

    Any hashable labels (ints, strings) may be used; equal inputs yield equal streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
