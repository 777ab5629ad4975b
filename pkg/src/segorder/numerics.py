"""Dense tensors with tape-based reverse-mode autodiff.

Every op records a closure that maps the output gradient to one gradient per
input; ``Tensor.backward`` walks the tape from a scalar root in reverse
topological order. Arrays are plain numpy buffers, so precision follows the
dtype the parameters were created with (float32 for training, float64 for
gradient certification).

``finite_difference_check`` is the independent oracle used to certify the
analytic backward passes, and ``RngStream`` provides the purpose-tagged
deterministic random streams the data pipeline draws from.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
import struct
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import CorruptionError, DeterminismError, DimensionError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar root, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_toposort(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._prev = tuple(parents)
        out._backward = backward
    else:
        out._prev = ()
        out._backward = None
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


# linear algebra and shape ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(
        np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),)
    )


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated advanced indices accumulate in backward."""
    basic = _is_basic_index(idx)

    def backward(g):
        gx = np.zeros_like(a.data)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _result(a.data[idx], (a,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather along axis 0 (embedding lookup); ``ids`` may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward(g):
        gx = np.zeros_like(table.data)
        np.add.at(gx, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gx,)

    return _result(table.data[ids], (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _result(out, (a,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# normalisation and probabilities ---------------------------------------------


def _check_finite(x: np.ndarray, op: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = m.data
    _check_finite(x, "softmax_rows")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (m,), backward)


def log_softmax(m: Tensor) -> Tensor:
    x = m.data
    _check_finite(x, "log_softmax")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (m,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last extent {d} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def _check_targets(targets, n: int, c: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"expected {n} targets, got {t.shape[0]}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target out of range [0, {c})")
    return t


def _reduce(picked: Tensor, reduction: str) -> Tensor:
    if reduction == "sum":
        return -tsum(picked)
    if reduction == "mean":
        return -tmean(picked)
    if reduction == "none":
        return -picked
    raise ValueError(f"unknown reduction {reduction!r}")


def nll_from_probs(probs: Tensor, targets, reduction: str = "sum") -> Tensor:
    """-sum_i log p[i, t_i] from a row-stochastic matrix."""
    n, c = probs.shape
    t = _check_targets(targets, n, c)
    return _reduce(log(index(probs, (np.arange(n), t))), reduction)


def nll_from_logits(logits: Tensor, targets, reduction: str = "sum") -> Tensor:
    """Same quantity as ``nll_from_probs(softmax_rows(logits))`` via fused log-softmax."""
    n, c = logits.shape
    t = _check_targets(targets, n, c)
    return _reduce(index(log_softmax(logits), (np.arange(n), t)), reduction)



def bce_with_logits(z: Tensor, targets, weights=None) -> Tensor:
    """Elementwise (optionally weighted) binary cross-entropy on logits."""
    x = z.data
    y = np.asarray(targets, dtype=x.dtype)
    w = np.ones_like(x) if weights is None else np.broadcast_to(np.asarray(weights, dtype=x.dtype), x.shape)
    loss = w * (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x))))
    return _result(loss, (z,), lambda g: (g * w * (_sigmoid(x) - y),))

# gradient oracle -------------------------------------------------------------


def _named(params) -> list:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(getattr(p, "name", None) or f"param{i}", p) for i, p in enumerate(params)]


def _eval(f, params) -> float:
    with no_grad():
        return float(np.asarray(as_tensor(f(params)).data))


def finite_difference_report(
    f: Callable,
    params,
    eps: float | None = None,
    max_coords: int = 256,
    seed: int = 0,
    stencil: int = 4,
) -> dict:
    """Per-tensor max relative error between analytic and numeric gradients.

    ``f(params)`` must return a scalar Tensor built from ``params``. Numeric
    derivatives use central differences at each checked coordinate; tensors
    with more than ``max_coords`` entries are subsampled with a seeded choice.
    The error at a coordinate is |a - n| / max(|a|, |n|, 1e-8).

    A float ``eps`` fixes the step and ``stencil`` (2, 4 or 6 points). With
    ``eps=None`` the step is chosen per coordinate: a six-point estimate at
    1e-2 is kept when it agrees with a four-point estimate at 1e-3 to within
    the latter's rounding noise, otherwise the 1e-3 estimate is used. Freshly
    initialised attention weights have gradients near 1e-8, which only a
    large step resolves, while embeddings feeding a LayerNorm at small scale
    are curved enough that only a small step is accurate.
    """
    named = _named(params)
    first, second = _eval(f, params), _eval(f, params)
    if first != second:
        raise DeterminismError(f"objective is not deterministic ({first!r} != {second!r})")

    for _, p in named:
        p.grad = None
    root = f(params)
    root.backward()

    rng = np.random.default_rng(seed)
    report = {}
    for name, p in named:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat, aflat = p.data.reshape(-1), analytic.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            if eps is None:
                num = _adaptive_difference(f, params, flat, int(c), first)
            else:
                num = _central_difference(f, params, flat, int(c), eps, stencil)
            a = float(aflat[c])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return report


def _central_difference(f, params, flat, c, eps, stencil) -> float:
    orig = flat[c]

    def at(delta):
        flat[c] = orig + delta
        return _eval(f, params)

    try:
        if stencil == 2:
            return (at(eps) - at(-eps)) / (2 * eps)
        if stencil == 4:
            near = at(eps) - at(-eps)
            far = at(2 * eps) - at(-2 * eps)
            return (8 * near - far) / (12 * eps)
        if stencil == 6:
            d1 = at(eps) - at(-eps)
            d2 = at(2 * eps) - at(-2 * eps)
            d3 = at(3 * eps) - at(-3 * eps)
            return (45 * d1 - 9 * d2 + d3) / (60 * eps)
        raise ValueError("stencil must be 2, 4 or 6")
    finally:
        flat[c] = orig


def _adaptive_difference(f, params, flat, c, value, coarse=1e-2, fine=1e-3) -> float:
    wide = _central_difference(f, params, flat, c, coarse, 6)
    narrow = _central_difference(f, params, flat, c, fine, 4)
    noise = 16 * np.finfo(flat.dtype).eps * max(abs(value), 1.0) / fine
    return wide if abs(wide - narrow) <= noise else narrow


def finite_difference_check(f: Callable, params, eps: float | None = None, max_coords: int = 256,
                            seed: int = 0, stencil: int = 4) -> float:
    """Max relative gradient error over all checked coordinates of all tensors."""
    report = finite_difference_report(f, params, eps, max_coords, seed, stencil)
    return max(report.values(), default=0.0)


# deterministic random streams ------------------------------------------------


def stable_hash64(value) -> int:
    """Platform-independent 64-bit hash of a string or bytes."""
    raw = value if isinstance(value, (bytes, bytearray)) else str(value).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


class RngStream:
    """Philox generator keyed by (global_seed, purpose, document_id, epoch).

    Equal keys give equal draw sequences; different purpose tags feed
    different entropy words into the seed sequence, giving independent streams.
    Generator methods (``random``, ``integers``, ``permutation``...) are
    available directly on the stream.
    """

    def __init__(self, global_seed: int, purpose: str, document_id="", epoch: int = 0):
        self.key = (int(global_seed), str(purpose), str(document_id), int(epoch))
        entropy = [
            int(global_seed) & 0xFFFFFFFFFFFFFFFF,
            stable_hash64(purpose),
            stable_hash64(document_id),
            int(epoch) & 0xFFFFFFFFFFFFFFFF,
        ]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __getattr__(self, name):
        return getattr(self.generator, name)

    def __repr__(self):
        return "RngStream(seed={}, purpose={!r}, doc={!r}, epoch={})".format(*self.key)


# tensor block serialisation --------------------------------------------------

_DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def pack_tensor(name: str, array) -> bytes:
    """(name, dtype tag, shape, little-endian row-major payload)."""
    arr = np.ascontiguousarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(dt, copy=False).tobytes()


def unpack_tensor(buf: bytes, offset: int = 0):
    """Inverse of ``pack_tensor``; returns (name, array, next_offset)."""
    start = offset

    def need(n):
        if offset + n > len(buf):
            raise CorruptionError("truncated tensor block", start)

    need(2)
    (nlen,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    need(nlen + 2)
    name = bytes(buf[offset : offset + nlen]).decode("utf-8")
    offset += nlen
    tag, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if tag not in _TAG_DTYPES:
        raise CorruptionError(f"unknown dtype tag {tag} in tensor {name!r}", start)
    need(8 * ndim)
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dt = _TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    need(nbytes)
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
    return name, arr.astype(dt.newbyteorder("="), copy=True), offset + nbytes

