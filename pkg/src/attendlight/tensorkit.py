"""Small reverse-mode autodiff over numpy arrays.

Only what the AttendLight networks need: batched matmul, broadcasting
elementwise arithmetic, a few nonlinearities, (masked) softmax, indexing,
the additive attention block, an LSTM cell, Adam and a finite-difference
checker. Arrays are float32 for training; build a ``ParamStore`` with
``dtype=np.float64`` for gradient checks.
"""

from __future__ import annotations

import contextlib
import math
import struct
from collections.abc import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (rollouts only need forward values)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("_backward", "_parents", "data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reachable from ``loss``."""
    if not loss.requires_grad or loss.data.size != 1:
        raise ValueError("backward needs a scalar tensor recorded on the tape")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    # interior nodes get fresh gradient buffers every pass; leaves accumulate
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: _accum(x, g * (1.0 - y * y)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: _accum(x, g * y))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)  # overflow-free logistic
    return _node(y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _node(np.where(on, x.data, 0).astype(x.data.dtype), (x,), lambda g: _accum(x, g * on))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data))


def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) excludes entries."""
    if x.data.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    z = _masked(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _node(y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    if x.data.shape[-1] == 0:
        raise ValueError("log_softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        _accum(x, g - np.exp(y) * g.sum(axis=-1, keepdims=True))
    return _node(y, (x,), bw)


# -- shape / reduction ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including a 1-D right operand."""
    a, b = as_tensor(a), as_tensor(b)
    vec = b.data.ndim == 1
    bd = b.data[:, None] if vec else b.data

    def bw(g):
        g2 = g[..., None] if vec else g
        if a.requires_grad:
            _accum(a, g2 @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g2 if a.data.ndim > 1 else np.outer(a.data, g2)
            gb = _unbroadcast(gb, bd.shape)
            _accum(b, gb[:, 0] if vec else gb)
    out = a.data @ bd
    return _node(out[..., 0] if vec else out, (a, b), bw)


def affine(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` with ``W`` of shape ``(out, in)``; works on batches of rows."""
    x, W = as_tensor(x), as_tensor(W)
    b = None if b is None else as_tensor(b)
    if x.shape[-1] != W.shape[1] or (b is not None and b.shape != (W.shape[0],)):
        raise ValueError(f"affine shape mismatch: x{x.shape}, W{W.shape}, b{None if b is None else b.shape}")
    y = matmul(x, transpose(W))
    return y if b is None else add(y, b)


def transpose(x: Tensor) -> Tensor:
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: _accum(x, np.swapaxes(g, -1, -2)))


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.data.shape)))


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))
    return _node(y, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if basic:
            x.grad[idx] += g  # views never alias twice
        else:
            np.add.at(x.grad, idx, g)
    return _node(x.data[idx], (x,), bw)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]

    def bw(g):
        for i, t in enumerate(items):
            _accum(t, np.take(g, i, axis=axis))
    return _node(np.stack([t.data for t in items], axis=axis), tuple(items), bw)


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    items = [as_tensor(t) for t in items]
    bounds = np.cumsum([t.data.shape[axis] for t in items])[:-1]

    def bw(g):
        for t, piece in zip(items, np.split(g, bounds, axis=axis)):
            _accum(t, piece)
    return _node(np.concatenate([t.data for t in items], axis=axis), tuple(items), bw)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- parameters ------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus their Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=self.dtype)
        p = Tensor(arr, requires_grad=True)
        self.params[name] = p
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        return p

    def init_uniform(self, name: str, shape, fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_values(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arr.shape} vs {self.params[k].data.shape}")
            self.params[k].data = np.array(arr, dtype=self.dtype)

    def astype(self, dtype) -> ParamStore:
        out = ParamStore(dtype)
        for k, p in self.params.items():
            out.add(k, p.data)
        return out


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update on every parameter; gradients are cleared afterwards."""
    store.t += 1
    c1 = 1.0 - beta1 ** store.t
    c2 = 1.0 - beta2 ** store.t
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
        p.data = p.data - update
        p.grad = None


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before."""
    grads = [p.grad for p in store.params.values() if p.grad is not None]
    norm = math.sqrt(math.fsum(float(np.square(g, dtype=np.float64).sum()) for g in grads))
    if norm > max_norm > 0:
        for p in store.params.values():
            if p.grad is not None:
                p.grad = (p.grad * (max_norm / norm)).astype(p.grad.dtype)
    return norm


# -- composite blocks ---------------------------------------------------------------

def init_attention(store: ParamStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    for name in ("W_r", "W_q", "U_r", "U_q"):
        store.init_uniform(f"{prefix}.{name}", (d, d), d, rng)
    store.init_uniform(f"{prefix}.u_a", (d,), d, rng)


def attention_logits(refs: Tensor, query: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Alignment ``u_a . tanh(U_r W_r r_i + U_q W_q q)``.

    ``refs`` is ``(..., k, d)`` and ``query`` is ``(..., d)``; leading dims broadcast,
    so one set of references can be scored against several queries at once.
    """
    P = store.params
    r = affine(affine(refs, P[f"{prefix}.W_r"]), P[f"{prefix}.U_r"])
    q = affine(affine(query, P[f"{prefix}.W_q"]), P[f"{prefix}.U_q"])
    h = tanh(add(r, expand_dims(q, -2)))
    return matmul(h, P[f"{prefix}.u_a"])


def attention(refs, query, store: ParamStore, prefix: str, mask=None) -> Tensor:
    """Attention weights over the ``k`` references (softmax of the alignment)."""
    if isinstance(refs, (list, tuple)):
        if not refs:
            raise ValueError("attention over an empty reference set")
        refs = stack(refs)
    if refs.shape[-2] == 0:
        raise ValueError("attention over an empty reference set")
    return softmax(attention_logits(refs, as_tensor(query), store, prefix), mask)


def init_lstm(store: ParamStore, prefix: str, d_in: int, d: int, rng: np.random.Generator) -> None:
    store.init_uniform(f"{prefix}.W_x", (4 * d, d_in), d, rng)
    store.init_uniform(f"{prefix}.W_h", (4 * d, d), d, rng)
    store.init_uniform(f"{prefix}.b", (4 * d,), d, rng)


def lstm_cell(x, h, c, store: ParamStore, prefix: str, x_proj: Tensor | None = None):
    """Standard LSTM step; gate order in the stacked weights is (input, forget, cell, output).

    ``x_proj`` may carry a precomputed ``W_x x + b`` to batch the input projection
    over a whole sequence. Returns ``(output, h', c')`` with output equal to ``h'``.
    """
    P = store.params
    d = P[f"{prefix}.W_h"].shape[1]
    h, c = as_tensor(h), as_tensor(c)
    if h.shape[-1] != d or c.shape[-1] != d:
        raise ValueError("lstm state has the wrong width")
    if x_proj is None:
        x = as_tensor(x)
        if x.shape[-1] != P[f"{prefix}.W_x"].shape[1]:
            raise ValueError("lstm input has the wrong width")
        x_proj = affine(x, P[f"{prefix}.W_x"], P[f"{prefix}.b"])
    gates = add(x_proj, affine(h, P[f"{prefix}.W_h"]))
    i = sigmoid(gates[..., :d])
    f = sigmoid(gates[..., d:2 * d])
    g = tanh(gates[..., 2 * d:3 * d])
    o = sigmoid(gates[..., 3 * d:])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, h_new, c_new


# -- verification -------------------------------------------------------------------

def finite_diff_check(
    fn: Callable[[ParamStore], Tensor],
    store: ParamStore,
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    coordinates whose true gradient is ~0 from dividing roundoff by roundoff.
    With ``max_coords`` a seeded sample of coordinates is checked. ``tol`` is
    only used for the warning message attached to the result.
    """
    store.zero_grad()
    loss = fn(store)
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in store.items()}
    store.zero_grad()

    coords = [(k, i) for k, p in store.items() for i in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[j] for j in sorted(rng.choice(len(coords), max_coords, replace=False))]

    worst = 0.0
    with no_grad():
        for k, i in coords:
            flat = store[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(fn(store).data)
            flat[i] = orig - epsilon
            down = float(fn(store).data)
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic[k].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# -- checkpoints -----------------------------------------------------------------------

MAGIC = b"ATLK"
VERSION = 1


def write_checkpoint(tensors: dict[str, np.ndarray], d: int, flags: int = 0, meta: bytes = b"") -> bytes:
    """Serialise named tensors as little-endian float32 behind a versioned header."""
    out = [MAGIC, struct.pack("<IIII", VERSION, d, flags, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class CheckpointError(ValueError):
    pass


def read_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], int, int, bytes]:
    """Inverse of :func:`write_checkpoint`: ``(tensors, d, flags, meta)``."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        return _read_body(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None


def _read_body(blob: bytes):
    version, d, flags, n_meta = struct.unpack_from("<IIII", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 20
    meta = blob[off:off + n_meta]
    off += n_meta
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    return tensors, d, flags, meta


def params_of(stores: Iterable[tuple[str, ParamStore]]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": p.data for prefix, store in stores for k, p in store.items()}
