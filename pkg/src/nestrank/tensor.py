"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is exactly what a small transformer needs: matmul, elementwise
arithmetic, softmax / log-softmax, RMS normalization, rotary rotation,
embedding lookup, slicing, concatenation and reductions. Elementwise binary
ops accept equal shapes or a one-element operand; there is no general
broadcasting.

Gradients are produced by replaying a GradTape, the topologically ordered
record of one forward pass. Graphs are fully independent of each other:
tensors belonging to distinct graphs may be used concurrently from different
threads, and gradient recording can be switched off per thread with
``no_grad()``.

Tensor files use a little-endian binary layout: 4-byte magic ``TSR1``, a
uint32 rank, one uint64 per dimension, then the raw float64 payload in
row-major order.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "gather_rows",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "causal_attention",
    "tsum",
    "tmean",
    "rms_norm",
    "rope_rotate",
    "scale_shift",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread (inference mode)."""
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """A dense float64 array plus an optional backward-graph record.

    ``grad`` is populated (same shape as ``data``) for every tensor with
    ``requires_grad`` after a backward pass. Non-leaf tensors carry
    ``_parents`` and a ``_backward`` closure that scatters an incoming
    gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Only defined for one-element (scalar) results.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        GradTape.build(self).replay(seed=np.ones_like(self.data))

    # operator sugar; scalars mean python numbers or one-element tensors
    def __add__(self, other):
        return _add(self, _coerce(other))

    def __radd__(self, other):
        return _add(self, _coerce(other))

    def __sub__(self, other):
        return _add(self, _neg(_coerce(other)))

    def __rsub__(self, other):
        return _add(_neg(self), _coerce(other))

    def __mul__(self, other):
        return _mul(self, _coerce(other))

    def __rmul__(self, other):
        return _mul(self, _coerce(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division only supports python scalars; multiply by a reciprocal instead")
        return _mul(self, Tensor(np.float64(1.0) / np.float64(other)))

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    return out


def _result(data: np.ndarray, parents, make_backward) -> Tensor:
    """Build an op result, recording the graph only when it can matter."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return _make(data, parents, make_backward())
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


class GradTape:
    """Topologically ordered record of one forward pass.

    ``build`` collects every gradient-relevant node below a root by
    depth-first post-order, so a single ``replay`` visits each node exactly
    once, parents strictly after children.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def build(cls, root: Tensor) -> "GradTape":
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            nid = id(node)
            if nid in visited:
                continue
            visited.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        return cls(order)

    def replay(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        _accum(root, seed)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic (equal shapes or one-element operand)


def _binary_shapes_ok(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"elementwise op needs equal shapes or a scalar, got {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g.reshape(shape)


def _add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    data = a.data + b.data

    def mk():
        def bw(g):
            if a.requires_grad:
                _accum(a, _reduce_to(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _reduce_to(g, b.data.shape))

        return bw

    return _result(data, (a, b), mk)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    data = a.data * b.data

    def mk():
        ad, bd = a.data, b.data

        def bw(g):
            if a.requires_grad:
                _accum(a, _reduce_to(g * bd, ad.shape))
            if b.requires_grad:
                _accum(b, _reduce_to(g * ad, bd.shape))

        return bw

    return _result(data, (a, b), mk)


def _neg(a: Tensor) -> Tensor:
    def mk():
        def bw(g):
            if a.requires_grad:
                _accum(a, -g)

        return bw

    return _result(-a.data, (a,), mk)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """2-D matrix product; ``transpose_b`` computes a @ b.T without a copy."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    inner_a = a.shape[1]
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}"
                         + (" (transposed)" if transpose_b else ""))
    data = a.data @ b.data.T if transpose_b else a.data @ b.data

    def mk():
        ad, bd = a.data, b.data

        def bw(g):
            if transpose_b:
                if a.requires_grad:
                    _accum(a, g @ bd)
                if b.requires_grad:
                    _accum(b, g.T @ ad)
            else:
                if a.requires_grad:
                    _accum(a, g @ bd.T)
                if b.requires_grad:
                    _accum(b, ad.T @ g)

        return bw

    return _result(data, (a, b), mk)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def mk():
        def bw(g):
            if a.requires_grad:
                _accum(a, g.T)

        return bw

    return _result(a.data.T.copy(), (a,), mk)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def mk():
        old = a.data.shape

        def bw(g):
            if a.requires_grad:
                _accum(a, g.reshape(old))

        return bw

    return _result(a.data.reshape(shape), (a,), mk)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)

    def mk():
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(p, g[tuple(idx)])

        return bw

    return _result(data, tuple(parts), mk)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (a view; backward scatters zeros)."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def mk():
        def bw(g):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                buf[idx] = g
                _accum(a, buf)

        return bw

    return _result(a.data[idx], (a,), mk)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding). ``ids`` is a 1-D integer array."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range 0..{table.shape[0] - 1}")

    def mk():
        def bw(g):
            if table.requires_grad:
                buf = np.zeros_like(table.data)
                np.add.at(buf, ids, g)
                _accum(table, buf)

        return bw

    return _result(table.data[ids], (table,), mk)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def _unary(a: Tensor, fwd, dfdy):
    data = fwd(a.data)

    def mk():
        def bw(g):
            if a.requires_grad:
                _accum(a, g * dfdy(a.data, data))

        return bw

    return _result(data, (a,), mk)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def tanh(a: Tensor) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a: Tensor) -> Tensor:
    return _unary(a, lambda x: 1.0 / (1.0 + np.exp(-x)), lambda x, y: y * (1.0 - y))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def mk():
        def bw(g):
            if a.requires_grad:
                _accum(a, g * (sig + a.data * sig * (1.0 - sig)))

        return bw

    return _result(data, (a,), mk)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                     cos: np.ndarray, sin: np.ndarray, mask: np.ndarray,
                     scale: float) -> tuple[Tensor, Tensor]:
    """Multi-head attention over one sequence, fused into a single op.

    ``q``, ``k``, ``v`` are [L, d] projections; heads are contiguous column
    blocks of width d / n_heads. Rotary tables ``cos`` / ``sin`` are
    [L, head_dim] and ``mask`` is an additive [L, L] constant. Returns the
    concatenated head outputs [L, d] and the final position's attention
    distribution averaged over heads [L]. Both outputs backpropagate into
    q, k and v.
    """
    L, d = q.shape
    if k.shape != (L, d) or v.shape != (L, d):
        raise ShapeError(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
    if d % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide feature dim {d}")
    hd = d // n_heads
    if hd % 2:
        raise ShapeError(f"rotary rotation needs an even head dim, got {hd}")
    half = hd // 2

    def split(x):
        return x.reshape(L, n_heads, hd).transpose(1, 0, 2)

    def rot_half(x):
        return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)

    def rope(x):
        return x * cos + rot_half(x) * sin

    qr = rope(split(q.data))
    kr = rope(split(k.data))
    v3 = split(v.data)
    logits = qr @ kr.transpose(0, 2, 1) * scale + mask
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = (probs @ v3).transpose(1, 0, 2).reshape(L, d)
    row = probs[:, L - 1, :].mean(axis=0)

    if not (grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)):
        return Tensor(ctx), Tensor(row)

    def unrope(g):
        # transpose of the rotation: rotate by the opposite angle
        return g * cos - rot_half(g * sin)

    def merge(g3):
        return g3.transpose(1, 0, 2).reshape(L, d)

    def from_dprobs(dp):
        ds = (dp - np.sum(dp * probs, axis=-1, keepdims=True)) * probs * scale
        if q.requires_grad:
            _accum(q, merge(unrope(ds @ kr)))
        if k.requires_grad:
            _accum(k, merge(unrope(ds.transpose(0, 2, 1) @ qr)))

    def bw_ctx(g):
        g3 = g.reshape(L, n_heads, hd).transpose(1, 0, 2)
        if v.requires_grad:
            _accum(v, merge(probs.transpose(0, 2, 1) @ g3))
        from_dprobs(g3 @ v3.transpose(0, 2, 1))

    def bw_row(g):
        dp = np.zeros_like(probs)
        dp[:, L - 1, :] = g / n_heads
        from_dprobs(dp)

    ctx_t = _make(ctx, (q, k, v), bw_ctx)
    row_t = _make(row, (q, k, v), bw_row)
    return ctx_t, row_t


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``."""
    if a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def mk():
        def bw(g):
            if a.requires_grad:
                dot = np.sum(g * data, axis=axis, keepdims=True)
                _accum(a, (g - dot) * data)

        return bw

    return _result(data, (a,), mk)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    data = shifted - lse

    def mk():
        sm = np.exp(data)

        def bw(g):
            if a.requires_grad:
                _accum(a, g - sm * np.sum(g, axis=axis, keepdims=True))

        return bw

    return _result(data, (a,), mk)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-softmax of a 1-D logit vector at ``target``."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy needs a 1-D logit vector, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    return _neg(narrow(log_softmax(logits, axis=0), 0, target, target + 1))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    if axis is None or keepdims:
        expand = lambda g: np.broadcast_to(np.asarray(g), a.data.shape)  # noqa: E731
    else:
        expand = lambda g: np.broadcast_to(np.expand_dims(g, axis), a.data.shape)  # noqa: E731

    def mk():
        def bw(g):
            if a.requires_grad:
                _accum(a, expand(g).copy() if np.ndim(g) else np.full_like(a.data, g))

        return bw

    return _result(np.asarray(data), (a,), mk)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.data.shape[axis]
    return _mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(np.float64(1.0 / n)))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale-only normalization over the last axis: x / rms(x) * gain."""
    if x.shape[-1] != gain.size:
        raise ShapeError(f"rms_norm gain size {gain.shape} does not match feature dim of {x.shape}")
    d = x.shape[-1]
    xd = x.data
    if xd.ndim == 2:
        ms = np.einsum("ij,ij->i", xd, xd)[:, None] / d
    else:
        ms = np.mean(xd * xd, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    gd = gain.data.reshape(-1)
    data = xd * inv * gd

    def mk():
        def bw(g):
            u = g * gd
            if x.requires_grad:
                dot = np.sum(u * x.data, axis=-1, keepdims=True)
                _accum(x, u * inv - x.data * (dot * inv**3 / d))
            if gain.requires_grad:
                gg = np.sum(g * x.data * inv, axis=tuple(range(g.ndim - 1)))
                _accum(gain, gg.reshape(gain.data.shape))

        return bw

    return _result(data, (x, gain), mk)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary rotation of paired feature halves by constant phase tables.

    ``cos`` / ``sin`` have x's shape; columns j and j + d/2 form a pair
    rotated by the same angle. The backward pass is rotation by the
    opposite angle.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotary rotation needs an even feature dim, got {d}")
    h = d // 2

    def rot_half(v):
        return np.concatenate([-v[..., h:], v[..., :h]], axis=-1)

    data = x.data * cos + rot_half(x.data) * sin

    def mk():
        def bw(g):
            if x.requires_grad:
                _accum(x, g * cos - rot_half(g * sin))

        return bw

    return _result(data, (x,), mk)


def scale_shift(x: Tensor, scale: float, shift: np.ndarray | None = None) -> Tensor:
    """x * scale + shift, where shift is a non-learned constant (e.g. a mask)."""
    data = x.data * scale
    if shift is not None:
        data = data + shift

    def mk():
        def bw(g):
            if x.requires_grad:
                _accum(x, g * scale)

        return bw

    return _result(data, (x,), mk)


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"TSR1"


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as f:
        f.write(_tensor_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        blob = f.read()
    t, used = tensor_from_bytes(blob)
    if used != len(blob):
        raise ValueError(f"trailing bytes in tensor file {path}")
    return t


def _tensor_bytes(t: Tensor) -> bytes:
    dims = t.data.shape
    head = _MAGIC + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return head + np.ascontiguousarray(t.data, dtype="<f8").tobytes()


def tensor_from_bytes(blob: bytes, offset: int = 0):
    """Decode one serialized tensor; returns (tensor, next offset)."""
    if blob[offset:offset + 4] != _MAGIC:
        raise ValueError("bad tensor magic; not a tensor blob")
    offset += 4
    (ndim,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(dims)
    offset += 8 * count
    return Tensor(data.astype(np.float64)), offset
