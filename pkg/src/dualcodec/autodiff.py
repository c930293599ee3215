"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation creates a new :class:`Tensor` holding its parents and a
backward closure. Nodes carry a monotonically increasing sequence number, so
the recording order of the (implicit) tape is recoverable: ``backward`` visits
reachable nodes in reverse recording order, which is a valid reverse
topological order for a define-by-run graph.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_seq = itertools.count()
_grad_enabled = True


class GradientError(RuntimeError):
    """Raised on misuse of the tape or on non-finite values."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)
        self._consumed = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Intermediate nodes keep their gradients too, so they can be inspected.
    The graph is released afterwards; a second call on the same graph raises.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError("backward already ran on this graph")
    if not loss.requires_grad:
        return
    if not np.all(np.isfinite(loss.data)):
        raise GradientError("loss is not finite")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _make(a.data**exponent, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: _accumulate(a, g * np.cos(a.data)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: _accumulate(a, g * np.sign(a.data)))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero wherever the floor is active."""
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: _accumulate(a, g * mask))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), bw)


def magnitude(re: Tensor, im: Tensor) -> Tensor:
    """sqrt(re**2 + im**2) with gradient defined as zero at the origin."""
    out = np.hypot(re.data, im.data)
    safe = np.where(out > 0, out, 1.0)

    def bw(g):
        scale = np.where(out > 0, g / safe, 0.0)
        _accumulate(re, scale * re.data)
        _accumulate(im, scale * im.data)

    return _make(out, (re, im), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inv)))


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad_last(a: Tensor, left: int, right: int, mode: str = "constant") -> Tensor:
    """Pad the last axis. ``mode`` is "constant" (zeros) or "reflect"."""
    n = a.shape[-1]
    if mode == "reflect" and (left >= n or right >= n):
        raise ValueError(f"reflect padding of {max(left, right)} needs more than {n} samples")
    width = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    out = np.pad(a.data, width, mode=mode)

    def bw(g):
        gx = g[..., left : left + n].copy()
        if mode == "reflect":
            if left:
                gx[..., 1 : left + 1] += g[..., :left][..., ::-1]
            if right:
                gx[..., n - right - 1 : n - 1] += g[..., left + n :][..., ::-1]
        _accumulate(a, gx)

    return _make(out, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add back."""
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _make(table.data[indices], (table,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(as_tensor(a).data)


def straight_through(inp: Tensor, quantized: Tensor) -> Tensor:
    """Forward value of ``quantized``; backward routes the gradient to ``inp`` only."""
    if inp.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {inp.shape} vs {quantized.shape}")
    return _make(np.array(quantized.data, copy=True), (inp,), lambda g: _accumulate(inp, g))


# ---------------------------------------------------------------------------
# convolutions, layout (batch, channels, time)
# ---------------------------------------------------------------------------

def _gather_taps(x: np.ndarray, k: int, stride: int, dilation: int) -> np.ndarray:
    """(B, C, L) -> (B, K*C, T_out), row k*C + c holding x[c, t*stride + k*dilation]."""
    b, c, _ = x.shape
    span = (k - 1) * dilation + 1
    win = sliding_window_view(x, span, axis=2)[:, :, ::stride, ::dilation]  # (B, C, T_out, K)
    return np.ascontiguousarray(win.transpose(0, 3, 1, 2)).reshape(b, k * c, win.shape[2])


def _scatter_taps(cols: np.ndarray, channels: int, length: int, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_gather_taps`: (B, K*C, T_out) -> (B, C, length)."""
    b, kc, t_out = cols.shape
    k = kc // channels
    if dilation == 1 and k % stride == 0:
        # taps r*stride .. r*stride + stride - 1 of window t fill block t + r
        n_blocks = max(-(-length // stride), t_out + k // stride - 1)
        blocks = np.zeros((b, channels, n_blocks, stride))
        g5 = cols.reshape(b, k // stride, stride, channels, t_out)
        for r in range(k // stride):
            blocks[:, :, r : r + t_out, :] += g5[:, r].transpose(0, 2, 3, 1)
        return blocks.reshape(b, channels, n_blocks * stride)[:, :, :length]
    out = np.zeros((b, channels, length))
    span = stride * (t_out - 1) + 1
    for tap in range(k):
        start = tap * dilation
        out[:, :, start : start + span : stride] += cols[:, tap * channels : (tap + 1) * channels]
    return out


def conv1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of x (B, C_in, T) with w (C_out, C_in, K)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x.data
    c_out, c_in, k = w.shape
    if xp.shape[2] < (k - 1) * dilation + 1:
        raise ValueError(f"input of length {xp.shape[2]} is shorter than the kernel span")
    cols = _gather_taps(xp, k, stride, dilation)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 1)).reshape(c_out, k * c_in)
    out = wmat @ cols
    if b is not None:
        out += b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, gw.reshape(c_out, k, c_in).transpose(0, 2, 1))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = _scatter_taps(wmat.T @ g, c_in, xp.shape[2], stride, dilation)
            _accumulate(x, gx[:, :, pl : pl + x.shape[2]])

    return _make(out, parents, bw)


def conv_transpose1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    crop: tuple[int, int] = (0, 0),
) -> Tensor:
    """Transposed convolution of x (B, C_in, T) with w (C_in, C_out, K).

    The uncropped output has length (T - 1) * stride + K; ``crop`` trims
    samples from the left and right ends.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose1d shape mismatch: x {x.shape}, w {w.shape}")
    bsz, _, t_in = x.shape
    c_in, c_out, k = w.shape
    full_len = (t_in - 1) * stride + k
    wt = np.ascontiguousarray(w.data.transpose(2, 1, 0)).reshape(k * c_out, c_in)
    full = _scatter_taps(wt @ x.data, c_out, full_len, stride, 1)
    cl, cr = crop
    out = full[:, :, cl : full_len - cr]
    if b is not None:
        out = out + b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gfull = np.zeros((bsz, c_out, full_len))
        gfull[:, :, cl : full_len - cr] = g
        gcols = _gather_taps(gfull, k, stride, 1)  # (B, K*C_out, T_in)
        if x.requires_grad:
            _accumulate(x, wt.T @ gcols)
        if w.requires_grad:
            gwt = np.matmul(gcols, x.data.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, gwt.reshape(k, c_out, c_in).transpose(2, 1, 0))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2)))

    return _make(np.ascontiguousarray(out), parents, bw)


def frames(x: Tensor, size: int, hop: int) -> Tensor:
    """Overlapping frames of the last axis: (B, L) -> (B, n_frames, size)."""
    if x.ndim != 2:
        raise ValueError(f"frames expects (B, L), got {x.shape}")
    length = x.shape[1]
    if length < size:
        raise ValueError(f"signal of {length} samples is shorter than one {size}-sample frame")
    win = sliding_window_view(x.data, size, axis=1)[:, ::hop]
    n = win.shape[1]

    def bw(g):
        gx = _scatter_taps(np.ascontiguousarray(g.transpose(0, 2, 1))[:, :, None, :].reshape(g.shape[0], size, n),
                           1, length, hop, 1)
        _accumulate(x, gx[:, 0])

    return _make(np.ascontiguousarray(win), (x,), bw)


def rfft_parts(x: Tensor) -> tuple[Tensor, Tensor]:
    """Real and imaginary parts of the one-sided DFT along the last axis."""
    n = x.shape[-1]
    spec = np.fft.rfft(x.data, axis=-1)
    bins = spec.shape[-1]
    half = np.full(bins, 0.5)
    half[0] = 1.0
    if n % 2 == 0:
        half[-1] = 1.0

    # d/dx_n of sum_k gr_k cos(2 pi k n / N) - gi_k sin(2 pi k n / N) is N * irfft(half * (gr + i gi))
    def bw_re(g):
        _accumulate(x, n * np.fft.irfft(g * half, n=n, axis=-1))

    def bw_im(g):
        _accumulate(x, n * np.fft.irfft(1j * g * half, n=n, axis=-1))

    re = _make(spec.real.copy(), (x,), bw_re)
    im = _make(spec.imag.copy(), (x,), bw_im)
    return re, im


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel convolution: x (B, C, T), w (C, K), stride 1."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"depthwise_conv1d shape mismatch: x {x.shape}, w {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    k = w.shape[1]
    win = sliding_window_view(xp, k, axis=2)  # (B, C, T_out, K)
    t_out = win.shape[2]
    out = np.einsum("bctk,ck->bct", win, w.data)
    if b is not None:
        out = out + b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.einsum("bct,bctk->ck", g, win))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for tap in range(k):
                gx[:, :, tap : tap + t_out] += g * w.data[None, :, tap, None]
            _accumulate(x, gx[:, :, padding : padding + x.shape[2]])

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1_loss(a, b) -> Tensor:
    return mean(absolute(sub(a, b)))


def mse_loss(a, b) -> Tensor:
    d = sub(a, b)
    return mean(d * d)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(
    op: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    ``op`` maps a tensor to a tensor that is summed to a scalar. The error per
    coordinate is |analytic - numeric| / max(|numeric|, 1e-8). ``coords``
    restricts the check to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = op(leaf)
    tsum(out).backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            with no_grad(), np.errstate(all="ignore"):
                v = float(np.sum(op(Tensor(probe.reshape(base.shape))).data))
            if not np.isfinite(v):
                raise GradientError(f"op is not finite at perturbed coordinate {i}")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
