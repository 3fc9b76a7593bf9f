"""Dense tensors with reverse-mode automatic differentiation.

The op set covers exactly what the speaker-embedding models need: matrix
products, 1-D convolution, GRU cells, softmax, statistics pooling, and a
small family of elementwise/reduction ops.  Gradients are recorded on an
explicit tape (:class:`Graph`) whose insertion order is already a
topological order; :func:`backward` replays the tape once in reverse.

Everything runs on float64 by default so finite-difference checks are
meaningful; float32 can be requested per tensor for speed.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64
VAR_FLOOR = 1e-12  # variance floor used by the pooling ops before sqrt

__all__ = [
    "Tensor", "Graph", "record", "backward", "grad_check",
    "matmul", "conv1d", "gru_cell", "softmax", "log_sum_exp", "pick",
    "stats_pool", "weighted_stats_pool",
    "add", "sub", "mul", "neg", "relu", "sigmoid", "tanh",
    "concat", "reshape", "slice_axis", "mean", "tsum",
    "dropout", "batchnorm",
    "save_array", "load_array", "save_archive", "load_archive",
]


class Tensor:
    """A numpy array plus an optional gradient and tape node."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class _Node:
    __slots__ = ("inputs", "out", "bwd", "graph")

    def __init__(self, inputs, out, bwd, graph):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd
        self.graph = graph


class Graph:
    """Append-only tape of operations; insertion order == topological order."""

    def __init__(self):
        self.nodes = []
        self.finished = False


_ACTIVE: Graph | None = None


@contextmanager
def record(graph: Graph | None = None):
    """Record every op built inside the block onto a tape."""
    global _ACTIVE
    prev = _ACTIVE
    g = graph if graph is not None else Graph()
    _ACTIVE = g
    try:
        yield g
    finally:
        _ACTIVE = prev


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, inputs, bwd) -> Tensor:
    """Create the output tensor of an op and register it on the active tape."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires and _ACTIVE is not None:
        node = _Node(inputs, out, bwd, _ACTIVE)
        out.node = node
        _ACTIVE.nodes.append(node)
    return out


def _accumulate(t: Tensor, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss.

    Visits the tape in exact reverse insertion order.  A tape can only be
    replayed once; record a new graph for the next step.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError("loss is not attached to a recorded graph")
    graph = loss.node.graph
    if graph.finished:
        raise RuntimeError("backward was already called on this graph; record a new one")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        node.bwd(out_grad)
    graph.finished = True


# ---------------------------------------------------------------------------
# elementwise / broadcasting ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bwd)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), bwd)


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis)
    count = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g / count))
        else:
            _accumulate(a, np.expand_dims(g, axis) / count * np.ones_like(a.data))

    return _make(np.asarray(out), (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g))
        else:
            _accumulate(a, np.expand_dims(g, axis) * np.ones_like(a.data))

    return _make(np.asarray(out), (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    base = list(tensors[0].shape)
    ax = axis % len(base)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != ax and other[i] != base[i] for i in range(len(base))
        ):
            raise ValueError(
                f"concat shape mismatch: {tensors[0].shape} vs {t.shape} on axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]

    def bwd(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(offset, offset + n)
            _accumulate(t, g[tuple(idx)])
            offset += n

    return _make(out, tuple(tensors), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accumulate(a, full)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """a @ b where a is (..., m, k) and b is a 2-D (k, n) matrix."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 2:
                _accumulate(b, a.data.T @ g)
            else:
                axes = list(range(a.ndim - 1))
                _accumulate(b, np.tensordot(a.data, g, axes=(axes, axes)))

    return _make(out, (a, b), bwd)


def conv1d(x, kernel, bias) -> Tensor:
    """Same-padded 1-D convolution over the time axis.

    x is (T, C_in) or (batch, T, C_in); kernel is (width, C_in, C_out) with
    odd width; bias is (C_out,).  Output keeps the time length.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernel.ndim != 3 or bias.ndim != 1:
        raise ValueError(
            f"conv1d expects (T,Cin) or (B,T,Cin) input, (w,Cin,Cout) kernel, "
            f"(Cout,) bias; got {x.shape}, {kernel.shape}, {bias.shape}"
        )
    w, cin, cout = kernel.shape
    if w % 2 == 0:
        raise ValueError(f"conv1d kernel width must be odd, got {w}")
    if xd.shape[-1] != cin or bias.shape[0] != cout:
        raise ValueError(
            f"conv1d channel mismatch: input {x.shape}, kernel {kernel.shape}, "
            f"bias {bias.shape}"
        )
    batch, t, _ = xd.shape
    pad = w // 2
    xp = np.zeros((batch, t + 2 * pad, cin), dtype=xd.dtype)
    xp[:, pad:pad + t] = xd
    out = np.broadcast_to(bias.data, (batch, t, cout)).copy()
    for d in range(w):
        out += xp[:, d:d + t] @ kernel.data[d]

    def bwd(g):
        gb = g[None] if g.ndim == 2 else g
        if bias.requires_grad:
            _accumulate(bias, gb.sum(axis=(0, 1)))
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for d in range(w):
                gk[d] = np.tensordot(xp[:, d:d + t], gb, axes=([0, 1], [0, 1]))
            _accumulate(kernel, gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for d in range(w):
                gxp[:, d:d + t] += gb @ kernel.data[d].T
            gx = gxp[:, pad:pad + t]
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, (x, kernel, bias), bwd)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(x, out * (g - inner))

    return _make(out, (x,), bwd)


def log_sum_exp(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def bwd(g):
        _accumulate(x, np.expand_dims(g, axis) * (e / s))

    return _make(out, (x,), bwd)


def pick(x, indices) -> Tensor:
    """Select x[i, indices[i]] for each row of a 2-D tensor."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"pick expects (B,K) and (B,) indices; got {x.shape}, {idx.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ValueError(
            f"pick index out of range: values in [{idx.min()}, {idx.max()}] "
            f"for {x.shape[1]} classes"
        )
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            _accumulate(x, gx)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def stats_pool(seq) -> Tensor:
    """Concatenate per-dimension mean and std over the second-to-last axis.

    (T, E) pools to (2E,); (..., T, E) pools to (..., 2E).  The std uses the
    biased estimator with the variance floored at VAR_FLOOR before sqrt.
    """
    seq = _wrap(seq)
    if seq.ndim < 2:
        raise ValueError(f"stats_pool expects at least 2 dims, got shape {seq.shape}")
    t = seq.shape[-2]
    if t == 0:
        raise ValueError("stats_pool got an empty sequence (T=0)")
    # Delegate to the weighted form with exactly-uniform weights; softmax of a
    # zero score vector produces these same weights bit for bit, which keeps
    # attention-with-zero-scores and plain pooling byte-identical.
    uniform = Tensor(np.full(seq.shape[:-1], 1.0 / t, dtype=seq.data.dtype))
    return weighted_stats_pool(seq, uniform)


def weighted_stats_pool(seq, weights) -> Tensor:
    """Weighted mean and weighted std over the second-to-last axis.

    mu_e = sum_t w_t x_te and var_e = sum_t w_t (x_te - mu_e)^2, with the
    variance floored before sqrt.  With uniform weights summing to one this
    reproduces stats_pool exactly.
    """
    seq, weights = _wrap(seq), _wrap(weights)
    if seq.ndim < 2 or weights.shape != seq.shape[:-1]:
        raise ValueError(
            f"weighted_stats_pool shape mismatch: seq {seq.shape}, weights {weights.shape}"
        )
    if seq.shape[-2] == 0:
        raise ValueError("weighted_stats_pool got an empty sequence (T=0)")
    w = weights.data[..., None]
    mu = (w * seq.data).sum(axis=-2)
    centered = seq.data - mu[..., None, :]
    var = (w * centered * centered).sum(axis=-2)
    floored = np.maximum(var, VAR_FLOOR)
    sd = np.sqrt(floored)
    out = np.concatenate([mu, sd], axis=-1)

    def bwd(g):
        e = mu.shape[-1]
        g_mu = g[..., :e]
        g_sd = g[..., e:]
        live = (var > VAR_FLOOR).astype(seq.data.dtype)
        g_var = g_sd * live / (2.0 * sd)
        # d var_e / d x_se = 2 w_s (c_se - sum_t w_t c_te); the correction term
        # vanishes only when the weights sum to one, so keep it general.
        wc = (w * centered).sum(axis=-2)
        if seq.requires_grad:
            gx = w * (
                g_mu[..., None, :]
                + 2.0 * (centered - wc[..., None, :]) * g_var[..., None, :]
            )
            _accumulate(seq, gx)
        if weights.requires_grad:
            gw = (seq.data * g_mu[..., None, :]).sum(axis=-1)
            gw += (centered * centered * g_var[..., None, :]).sum(axis=-1)
            gw -= 2.0 * (seq.data * (wc * g_var)[..., None, :]).sum(axis=-1)
            _accumulate(weights, gw)

    return _make(out, (seq, weights), bwd)


# ---------------------------------------------------------------------------
# regularisation layers
# ---------------------------------------------------------------------------

def dropout(x, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout: zero a fraction p and scale survivors by 1/(1-p)."""
    x = _wrap(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(mask, dtype=x.data.dtype))


def batchnorm(x, gamma, beta, running_mean, running_var,
              training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over all leading axes.

    The channel axis is the last one.  In training mode the (biased) batch
    statistics normalise the input and the running buffers are updated in
    place: new = momentum * old + (1 - momentum) * batch.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm parameter mismatch: input {x.shape}, gamma {gamma.shape}, "
            f"beta {beta.shape}"
        )
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    m = max(x.size // c, 1)

    def bwd(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            gxh = g * gamma.data
            if training:
                gx = (inv / m) * (
                    m * gxh - gxh.sum(axis=axes) - xhat * (gxh * xhat).sum(axis=axes)
                )
            else:
                gx = gxh * inv
            _accumulate(x, gx)

    return _make(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

def gru_cell(x, h_prev, params: dict) -> Tensor:
    """One GRU step.

    z = sigma(x Wz + h Uz + bz), r = sigma(x Wr + h Ur + br),
    hcand = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * hcand + z * h.
    x is (D,) or (B, D); h_prev is (H,) or (B, H).
    """
    x, h_prev = _wrap(x), _wrap(h_prev)
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
        h_prev = reshape(h_prev, (1, -1))
    d, h = params["wz"].shape
    if x.shape[-1] != d or h_prev.shape[-1] != h:
        raise ValueError(
            f"gru_cell dim mismatch: x {x.shape}, h_prev {h_prev.shape}, Wz {params['wz'].shape}"
        )
    z = sigmoid(add(add(matmul(x, params["wz"]), matmul(h_prev, params["uz"])), params["bz"]))
    r = sigmoid(add(add(matmul(x, params["wr"]), matmul(h_prev, params["ur"])), params["br"]))
    cand = tanh(add(add(matmul(x, params["wh"]), matmul(mul(r, h_prev), params["uh"])), params["bh"]))
    # h' = cand + z * (h_prev - cand)
    out = add(cand, mul(z, sub(h_prev, cand)))
    return reshape(out, (-1,)) if squeeze else out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, theta: Tensor, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of f(theta) against central differences.

    Returns the max over entries of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    theta.grad = None
    with record():
        y = f(theta)
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    backward(y)
    g_ad = np.zeros_like(theta.data) if theta.grad is None else theta.grad.copy()

    flat = theta.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(theta).data.reshape(-1)[0]
        flat[i] = orig - h
        lo = f(theta).data.reshape(-1)[0]
        flat[i] = orig
        g_fd[i] = (hi - lo) / (2.0 * h)
    g_fd = g_fd.reshape(theta.shape)

    if not (np.isfinite(g_ad).all() and np.isfinite(g_fd).all()):
        raise ValueError("grad_check saw non-finite gradients")
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


# ---------------------------------------------------------------------------
# binary serialisation
# ---------------------------------------------------------------------------

_MAGIC = b"HVT1"
_ARCHIVE_MAGIC = b"HVTA"


def _write_array(fh, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<q", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<q", dim))
    fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise IOError(f"truncated tensor file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array(fh) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != _MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}")
    rank, = struct.unpack("<q", _read_exact(fh, 8))
    if rank < 0 or rank > 32:
        raise ValueError(f"implausible tensor rank {rank}")
    shape = tuple(struct.unpack("<q", _read_exact(fh, 8))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8")
    return data.reshape(shape).copy()


def save_array(path, arr):
    with open(path, "wb") as fh:
        _write_array(fh, np.asarray(arr))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return _read_array(fh)


def save_archive(path, arrays: dict):
    """Write a keyed archive of named tensors."""
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(struct.pack("<q", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<q", len(raw)))
            fh.write(raw)
            _write_array(fh, np.asarray(arr))


def load_archive(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != _ARCHIVE_MAGIC:
            raise ValueError(f"bad archive magic {magic!r}, expected {_ARCHIVE_MAGIC!r}")
        count, = struct.unpack("<q", _read_exact(fh, 8))
        for _ in range(count):
            n, = struct.unpack("<q", _read_exact(fh, 8))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = _read_array(fh)
    return out
