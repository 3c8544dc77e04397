"""A small dense tensor with define-by-run reverse-mode differentiation.

Every op builds its output through :func:`_make`, which records the parent
tensors and a backward rule mapping the output gradient to one gradient per
parent.  :func:`backward` topologically sorts the recorded graph into a
:class:`Tape`, runs it once, and then releases it.

Feature maps are unbatched ``[C, H, W]`` arrays throughout.
"""

from __future__ import annotations

import contextlib
import os
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import CorruptionError, DimensionError, NumericalError, TapeError

DEFAULT_DTYPE = np.float64

_state = threading.local()
_debug = os.environ.get("HSEGNET_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle the post-op NaN/Inf check."""
    global _debug
    _debug = bool(flag)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dims must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    if _debug and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Topologically ordered record of the ops that produced a scalar."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.consumed = False

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, seed: np.ndarray) -> None:
        if self.consumed:
            raise TapeError("tape already consumed; rebuild the graph with a new forward pass")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in self.nodes:
            node._consumed = True
            node._parents = ()
            node._backward = None


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran on this graph")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    tape.run(np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# elementwise with the restricted broadcast rules


def _view_shape(small: tuple[int, ...], big: tuple[int, ...]) -> tuple[int, ...]:
    """Shape that ``small`` must be reshaped to so numpy broadcasts it over ``big``."""
    if small == big or small == ():
        return small
    if len(big) == 3 and small == (big[0],):
        return (big[0], 1, 1)
    if len(big) == 3 and small == (1,) + big[1:]:
        return small
    raise DimensionError(f"shapes {small} and {big} are not broadcastable")


def _broadcast(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    if a.shape == b.shape:
        return a.data, b.data, a.shape
    if a.data.size >= b.data.size:
        return a.data, b.data.reshape(_view_shape(b.shape, a.shape)), a.shape
    return a.data.reshape(_view_shape(a.shape, b.shape)), b.data, b.shape


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    if len(shape) == 1:
        return g.sum(axis=(1, 2))
    return g.sum(axis=0, keepdims=True)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y, _ = _broadcast(a, b)

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(x + y, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y, _ = _broadcast(a, b)

    def bw(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _make(x - y, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y, _ = _broadcast(a, b)

    def bw(g):
        return _reduce_to(g * y, a.shape), _reduce_to(g * x, b.shape)

    return _make(x * y, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    x, y, _ = _broadcast(a, b)
    out = x / y

    def bw(g):
        return _reduce_to(g / y, a.shape), _reduce_to(-g * out / y, b.shape)

    return _make(out, (a, b), bw, "div")


def elementwise(op: str, a, b) -> Tensor:
    ops = {"add": add, "mul": mul, "sub": sub, "div": div}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op](a, b)


# ---------------------------------------------------------------------------
# unary / reductions / reshaping


def _open_unit_bounds(dtype) -> tuple[float, float]:
    info = np.finfo(dtype)
    return float(info.tiny), float(np.nextafter(dtype(1), dtype(0)))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    # keep the range open even where 1/(1+e) rounds to 1.0
    lo, hi = _open_unit_bounds(d.dtype.type)
    s = np.clip(s, lo, hi)

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw, "sigmoid")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``max(x, eps)``; gradient is zero where the clamp is active."""
    kept = x.data > eps
    safe = np.where(kept, x.data, eps if eps > 0 else 1.0)
    out = np.log(safe) if eps > 0 else np.log(x.data)

    def bw(g):
        return (np.where(kept, g / safe, 0.0).astype(x.dtype, copy=False),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw, "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make(out, (x,), bw, "exp")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack ``[C_i, H, W]`` tensors along the channel axis."""
    spatial = {t.shape[1:] for t in tensors}
    if any(t.ndim != 3 for t in tensors) or len(spatial) != 1:
        raise DimensionError(f"concat needs [C,H,W] tensors with equal H,W: {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=0))

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), bw, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), bw, "slice")


def channel_mean(x: Tensor) -> Tensor:
    """``[C, H, W] -> [1, H, W]`` arithmetic mean over channels."""
    _require_rank(x, 3, "channel_mean")
    c = x.shape[0]

    def bw(g):
        return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=0, keepdims=True), (x,), bw, "channel_mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[C, H, W] -> [C]`` per-channel spatial mean."""
    _require_rank(x, 3, "global_avg_pool")
    c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, None, None], x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=(1, 2)), (x,), bw, "global_avg_pool")


def matvec(w: Tensor, v: Tensor) -> Tensor:
    if w.ndim != 2 or v.ndim != 1 or w.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec shapes {w.shape} @ {v.shape}")

    def bw(g):
        return np.outer(g, v.data), w.data.T @ g

    return _make(w.data @ v.data, (w, v), bw, "matvec")


def channel_spatial_outer(m_c: Tensor, m_x: Tensor) -> Tensor:
    """``[C]`` x ``[1, H, W]`` -> ``[C, H, W]`` with ``out[j, p] = m_c[j] * m_x[p]``."""
    if m_c.ndim != 1 or m_x.ndim != 3 or m_x.shape[0] != 1:
        raise DimensionError(f"outer expects [C] and [1,H,W], got {m_c.shape} and {m_x.shape}")
    a = m_c.data[:, None, None]

    def bw(g):
        return (g * m_x.data).sum(axis=(1, 2)), (g * a).sum(axis=0, keepdims=True)

    return _make(a * m_x.data, (m_c, m_x), bw, "outer")


def softmax_over_channels(x: Tensor) -> Tensor:
    _require_rank(x, 3, "softmax_over_channels")
    if x.shape[0] < 2:
        raise DimensionError("softmax over channels needs at least 2 channels")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def _require_rank(x: Tensor, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{name} expects rank-{rank} input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: [C, h, w, k, k] -> rows ordered (c, ki, kj) to match kernel.reshape(C_out, -1)
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, h * w)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | str = "same") -> Tensor:
    """Cross-correlation of ``[C_in, H, W]`` with ``[C_out, C_in, k, k]``, zero padded."""
    _require_rank(x, 3, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if padding == "same":
        if k % 2 == 0:
            raise DimensionError("same padding needs an odd kernel")
        pad = k // 2
    else:
        pad = int(padding)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"bias must be [{c_out}], got {bias.shape}")
    _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {k} larger than padded input {xp.shape[1:]}")
    cols = _im2col(xp, k, ho, wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        if not x.requires_grad:
            gx = None
        elif ho == h and wo == w:
            # same padding: input grad is the correlation of g with the flipped, transposed kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad))) if pad else g
            gx = (flipped @ _im2col(gp, k, h, w)).reshape(c_in, h, w)
        else:
            gcols = (wmat.T @ g2).reshape(c_in, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + ho, j : j + wo] += gcols[:, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


class IndexMap:
    """Argmax positions recorded by a 2x2 max pool.

    ``positions[c, i, j]`` is the row-major offset (0..3) of the winner inside
    window ``(i, j)`` of channel ``c``; ``source_shape`` is the pooled input shape.
    """

    __slots__ = ("positions", "source_shape")

    def __init__(self, positions: np.ndarray, source_shape: tuple[int, int, int]):
        self.positions = positions
        self.source_shape = tuple(source_shape)

    def flat_indices(self) -> np.ndarray:
        """Per-channel flat offsets into the ``H*W`` source plane."""
        c, h2, w2 = self.positions.shape
        rows = 2 * np.arange(h2)[:, None] + self.positions // 2
        cols = 2 * np.arange(w2)[None, :] + self.positions % 2
        return rows * self.source_shape[2] + cols


def _windows(d: np.ndarray) -> np.ndarray:
    c, h, w = d.shape
    return d.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)


def _unwindows(d: np.ndarray) -> np.ndarray:
    c, h2, w2, _ = d.shape
    return d.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)


def maxpool2x2_with_indices(x: Tensor) -> tuple[Tensor, IndexMap]:
    _require_rank(x, 3, "maxpool2x2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    win = _windows(x.data)
    # np.argmax returns the first maximum: row-major tie-break
    pos = win.argmax(axis=-1).astype(np.int8)
    vals = np.take_along_axis(win, pos[..., None].astype(np.intp), axis=-1)[..., 0]
    idx = IndexMap(pos, x.shape)

    def bw(g):
        return (_scatter(g, idx),)

    return _make(vals, (x,), bw, "maxpool2x2"), idx


def _scatter(y: np.ndarray, idx: IndexMap) -> np.ndarray:
    c, h2, w2 = y.shape
    win = np.zeros((c, h2, w2, 4), dtype=y.dtype)
    np.put_along_axis(win, idx.positions[..., None].astype(np.intp), y[..., None], axis=-1)
    return _unwindows(win)


def maxunpool2x2(y: Tensor, indices: IndexMap) -> Tensor:
    _require_rank(y, 3, "maxunpool2x2")
    c, h2, w2 = y.shape
    pos = indices.positions
    if pos.shape != y.shape or indices.source_shape != (c, 2 * h2, 2 * w2):
        raise DimensionError(f"index map {pos.shape} from {indices.source_shape} does not fit input {y.shape}")
    if pos.min(initial=0) < 0 or pos.max(initial=0) > 3:
        raise CorruptionError("pool index outside its 2x2 window")

    def bw(g):
        win = _windows(g)
        return (np.take_along_axis(win, pos[..., None].astype(np.intp), axis=-1)[..., 0],)

    return _make(_scatter(y.data, indices), (y,), bw, "maxunpool2x2")


# ---------------------------------------------------------------------------
# serialization: uint32 rank, uint32 dims, float64 payload, all little-endian


def write_tensor(fh: BinaryIO, arr) -> None:
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise CorruptionError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise CorruptionError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", raw)
    n = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise CorruptionError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
