"""Small float64 tensor library with reverse-mode automatic differentiation.

Everything in the package runs on this engine: n-dimensional float64 arrays
(0-d scalars, vectors, matrices), a handful of forward ops, and a tape-free
graph built from parent links plus per-op vector-Jacobian closures. Hot
forward/backward loops are delegated to :mod:`cskt._kernels`.

Design points that tests rely on:

* float64 everywhere; every op validates its output is finite and raises
  :class:`NonFiniteError` otherwise.
* gradients accumulate on leaves; repeated ``backward`` calls without
  ``zero_grad`` add up.
* ops record themselves on the graph only when some input requires grad and
  grad mode is enabled (see :func:`no_grad`).
* all ops are deterministic: same inputs, bit-identical outputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K

COSINE_EPS = 1e-12
# small enough that normalised rows keep variance within 1e-6 of 1
LAYER_NORM_EPS = 1e-9

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "grad_check",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "matmul",
    "transpose",
    "embedding",
    "concat",
    "stack",
    "tsum",
    "tmean",
    "cosine_similarity",
    "cross_entropy",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _contig(data) -> np.ndarray:
    # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
    arr = np.asarray(data, dtype=np.float64)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def _as_array(data) -> np.ndarray:
    arr = _contig(data)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"zero-length dimension in shape {arr.shape}")
    return arr


class Tensor:
    """Float64 array with an optional gradient slot and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

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
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the value."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{flags})"

    # -- operators -----------------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)


def _ensure_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output from op {op!r}")


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    arr = _contig(arr)
    _finite_or_raise(arr, op)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return _contig(g)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data  # non-finite results raise below
    except ValueError as exc:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _ensure_tensor(a)

    def vjp(g):
        return (-g,)

    return _result(-a.data, (a,), vjp, "neg")


# -- activations -------------------------------------------------------------


def relu(a) -> Tensor:
    a = _ensure_tensor(a)
    out = K.relu_fwd(a.data)

    def vjp(g):
        return (K.relu_bwd(a.data, _contig(g)),)

    return _result(out, (a,), vjp, "relu")


def sigmoid(a) -> Tensor:
    a = _ensure_tensor(a)
    y = K.sigmoid_fwd(a.data)

    def vjp(g):
        return (K.sigmoid_bwd(y, _contig(g)),)

    return _result(y, (a,), vjp, "sigmoid")


# -- reductions and shape ops ------------------------------------------------


def tsum(a, axis: int | None = None) -> Tensor:
    a = _ensure_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), a.shape)),)

    return _result(out, (a,), vjp, "sum")


def tmean(a, axis: int | None = None) -> Tensor:
    a = _ensure_tensor(a)
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / count),)
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g / count, axis), a.shape)),)

    return _result(out, (a,), vjp, "mean")


def transpose(a) -> Tensor:
    a = _ensure_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _result(a.data.T, (a,), vjp, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_ensure_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}") from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _result(out, tuple(ts), vjp, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors (0-d scalars included) along a new axis 0."""
    ts = [_ensure_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of empty sequence")
    base = ts[0].shape
    if any(t.shape != base for t in ts):
        raise ShapeError(f"stack: mismatched shapes {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=0)

    def vjp(g):
        return tuple(_contig(g[i]) for i in range(len(ts)))

    return _result(out, tuple(ts), vjp, "stack")


def _normalize_key(key, shape):
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > len(shape):
        raise ShapeError(f"too many indices for shape {shape}")
    slices = []
    for axis, k in enumerate(key):
        if not isinstance(k, slice) or k.step not in (None, 1):
            raise ShapeError("only contiguous slices are supported")
        slices.append(slice(*k.indices(shape[axis])))
    while len(slices) < len(shape):
        slices.append(slice(0, shape[len(slices)]))
    return tuple(slices)


def _slice(a: Tensor, key) -> Tensor:
    a = _ensure_tensor(a)
    slices = _normalize_key(key, a.shape)
    out = a.data[slices]
    if any(d < 1 for d in out.shape):
        raise ShapeError(f"slice {key!r} selects nothing from shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[slices] = g
        return (full,)

    return _result(out, (a,), vjp, "slice")


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` gathered by integer ``ids`` (1-d)."""
    weight = _ensure_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError(f"embedding ids must be a non-empty 1-d array, got shape {ids.shape}")
    if weight.ndim != 2:
        raise ShapeError(f"embedding table must be a matrix, got {weight.shape}")
    if ids.min() < 0 or ids.max() >= weight.shape[0]:
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]}): {ids.min()}..{ids.max()}")
    out = weight.data[ids]

    def vjp(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _result(out, (weight,), vjp, "embedding")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-d/2-d operands, got {a.shape} @ {b.shape}")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            out = a.data @ b.data  # non-finite results raise below
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        if a.ndim == 2 and b.ndim == 2:
            return np.ascontiguousarray(g @ b.data.T), np.ascontiguousarray(a.data.T @ g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g * b.data, g * a.data  # vector . vector

    return _result(out, (a, b), vjp, "matmul")


# -- normalisation -----------------------------------------------------------


def softmax(a) -> Tensor:
    """Softmax along the last axis (1-d or 2-d input)."""
    a = _ensure_tensor(a)
    if a.ndim not in (1, 2):
        raise ShapeError(f"softmax expects 1-d or 2-d input, got {a.shape}")
    x2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    y2 = K.softmax_fwd(x2)
    out = y2.reshape(a.shape)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(y2.shape))
        return (K.softmax_bwd(y2, g2).reshape(a.shape),)

    return _result(out, (a,), vjp, "softmax")


def layer_norm(a, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise along the last axis, then apply learned gain and bias."""
    a, gain, bias = _ensure_tensor(a), _ensure_tensor(gain), _ensure_tensor(bias)
    if a.ndim not in (1, 2):
        raise ShapeError(f"layer_norm expects 1-d or 2-d input, got {a.shape}")
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},), got {gain.shape}/{bias.shape}")
    x2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    y2, xhat, inv_std = K.layer_norm_fwd(x2, gain.data, bias.data, eps)
    out = y2.reshape(a.shape)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(y2.shape))
        gx, ggain, gbias = K.layer_norm_bwd(g2, xhat, inv_std, gain.data)
        return gx.reshape(a.shape), ggain, gbias

    return _result(out, (a, gain, bias), vjp, "layer_norm")


# -- similarity and classification losses ------------------------------------


def cosine_similarity(u, v) -> Tensor:
    """cos(u, v) with the denominator norms clamped below at 1e-12."""
    u, v = _ensure_tensor(u), _ensure_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape} vs {v.shape}")
    nu_raw = float(np.linalg.norm(u.data))
    nv_raw = float(np.linalg.norm(v.data))
    nu = max(nu_raw, COSINE_EPS)
    nv = max(nv_raw, COSINE_EPS)
    dot = float(u.data @ v.data)
    cos = dot / (nu * nv)

    def vjp(g):
        g = float(g)
        gu = v.data / (nu * nv)
        if nu_raw > COSINE_EPS:
            gu = gu - (cos / (nu * nu)) * u.data
        gv = u.data / (nu * nv)
        if nv_raw > COSINE_EPS:
            gv = gv - (cos / (nv * nv)) * v.data
        return g * gu, g * gv

    return _result(np.float64(cos), (u, v), vjp, "cosine_similarity")


def cross_entropy(logits, gold: int) -> Tensor:
    """Negative log softmax probability of ``gold``, computed with max-subtraction."""
    logits = _ensure_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.shape}")
    n = logits.shape[0]
    gold = int(gold)
    if not 0 <= gold < n:
        raise IndexError(f"gold index {gold} out of range for {n} choices")
    x = logits.data
    m = x.max()
    shifted = x - m
    lse = np.log(np.exp(shifted).sum())
    loss = lse - shifted[gold]
    probs = np.exp(shifted - lse)

    def vjp(g):
        grad = probs * float(g)
        grad[gold] -= float(g)
        return (grad,)

    return _result(np.float64(loss), (logits,), vjp, "cross_entropy")


# -- graph and backward ------------------------------------------------------


class Graph:
    """Topologically ordered op records reachable from a root tensor.

    ``nodes`` lists every reachable tensor with leaves first and the root
    last; backward walks it once in reverse.
    """

    def __init__(self, root: Tensor):
        if not isinstance(root, Tensor):
            raise TypeError("Graph root must be a Tensor")
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def backward(self) -> None:
        """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
        root = self.root
        if root.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                parent_grads = node._vjp(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    pg = _contig(pg)
                    if pg.shape != parent.shape:
                        raise ShapeError(
                            f"vjp of {node.op!r} produced shape {pg.shape} for parent {parent.shape}"
                        )
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; grads accumulate on leaves."""
    Graph(loss).backward()


def grad_check(f, params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> scalar Tensor`` must be deterministic. The numeric side
    uses only forward evaluations, so it is independent of the backward
    implementation it is checking. The error for one entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    max_err = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = f(params).item()
                flat[i] = orig - step
                f_minus = f(params).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
                if err > max_err:
                    max_err = err
    return max_err


# -- serialization -----------------------------------------------------------

TENSOR_MAGIC = b"TNSR"
TENSOR_FORMAT_VERSION = 1


class TensorFormatError(ValueError):
    """Malformed, truncated or wrong-version tensor blob."""


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Versioned flat binary: magic, version, ndim, dims, little-endian f64 data."""
    arr = t.data if isinstance(t, Tensor) else _contig(t)
    header = struct.pack("<4sII", TENSOR_MAGIC, TENSOR_FORMAT_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + dims + arr.astype("<f8", copy=False).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor blob, returning (array, next offset)."""

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise TensorFormatError(f"truncated tensor blob at byte {offset}")
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    magic, version, ndim = struct.unpack("<4sII", take(12))
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_FORMAT_VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
    count = 1
    for d in dims:
        if d < 1:
            raise TensorFormatError(f"invalid dimension {d}")
        count *= d
    data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
    return _contig(data.astype(np.float64)), offset


def save_tensor(t: Tensor | np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor blob")
    return Tensor(arr)
