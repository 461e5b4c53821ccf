"""Dense rank-4 float32 tensors with reverse-mode autodiff.

Every tensor is laid out (batch, channel, height, width). The operator set
is exactly what the restoration network needs: 1x1 / depthwise-3x3 /
strided-2x2 convolutions, channel layer norm, the multiplicative channel
split gate, simplified channel attention, pixel shuffling, channel softmax,
and a handful of elementwise/reduction ops for the losses.

Gradients are recorded on an explicit :class:`Tape`. Ops only record when a
tape is active and at least one input is tracked, so frozen subgraphs cost
nothing during backprop.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "scalar",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "conv2d",
    "layer_norm_channels",
    "simple_gate",
    "simplified_channel_attention",
    "global_avg_pool",
    "pixel_shuffle",
    "softmax",
    "softmax_channels",
    "reduce_sum",
    "mean_abs_error",
    "nll_loss",
    "backward",
    "zero_grad",
]

CONV_MODES = ("pointwise_1x1", "depthwise_3x3", "strided_2x2_down")


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class TapeError(RuntimeError):
    """Raised when the tape/backward contract is violated."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


class Tensor:
    """Rank-4 float32 array, optionally tracked for gradients.

    ``grad`` is allocated eagerly (zeros) for ``requires_grad`` leaves so an
    untouched parameter reads back a zero gradient after ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (N, C, H, W), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float) -> Tensor:
    """A (1,1,1,1) constant tensor."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float32))


def constant(array) -> Tensor:
    """Wrap an array as an untracked tensor (no copy if already f32)."""
    return Tensor(array)


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of tracked operations; parents always precede children."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t.tape is tape


def _record(out: Tensor, inputs, bwd) -> Tensor:
    stack = _tape_stack()
    if stack:
        tape = stack[-1]
        if any(_tracked(t, tape) for t in inputs):
            out.tape = tape
            out.node = len(tape.nodes)
            tape.nodes.append(_Node(out, inputs, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dX into ``.grad`` for every tensor that fed ``loss``.

    ``loss`` must be a scalar produced on ``tape``. Traversal is a single
    reverse sweep over the tape, so each node is visited exactly once.
    """
    if loss.tape is not tape or loss.node is None:
        raise TapeError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones((1, 1, 1, 1), dtype=np.float32)
    for node in reversed(tape.nodes[: loss.node + 1]):
        gout = node.out.grad
        if gout is None:
            continue
        grads = node.bwd(gout)
        for t, g in zip(node.inputs, grads):
            if g is None or not _tracked(t, tape):
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float32, copy=True)
            else:
                t.grad += g


def zero_grad(params) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; operands may broadcast on axes of extent 1."""
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"mul shapes not broadcastable: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _record(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = Tensor(x.data * c32)
    return _record(out, (x,), lambda g: (g * c32,))


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(dtype=np.float32).reshape(1, 1, 1, 1))
    shape = x.shape
    return _record(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape),))


def mean_abs_error(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements (scalar output)."""
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_error needs equal shapes, got {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.mean(np.abs(diff), dtype=np.float32).reshape(1, 1, 1, 1))
    inv_n = np.float32(1.0 / diff.size)

    def bwd(g):
        ga = np.sign(diff) * (g.reshape(()) * inv_n)
        return (ga, -ga)

    return _record(out, (a, b), bwd)


_NLL_FLOOR = 1e-12


def nll_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log of the probability at each sample's label.

    ``probs`` is (N, C, 1, 1); probabilities are clamped to 1e-12 before the
    log, and the clamp zeroes the gradient where it engages.
    """
    n, c, h, w = probs.shape
    if h != 1 or w != 1:
        raise ShapeError(f"nll_loss expects (N, C, 1, 1) probabilities, got {probs.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for batch of {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ShapeError(f"labels must be in [0, {c})")
    rows = np.arange(n)
    picked = probs.data[rows, labels, 0, 0].astype(np.float64)
    clamped = np.maximum(picked, _NLL_FLOOR)
    out = Tensor(np.float32(np.mean(-np.log(clamped))).reshape(1, 1, 1, 1))

    def bwd(g):
        gp = np.zeros_like(probs.data)
        live = picked > _NLL_FLOOR
        gp[rows[live], labels[live], 0, 0] = -1.0 / (clamped[live] * n)
        return (gp * g.reshape(()),)

    return _record(out, (probs,), bwd)


# ---------------------------------------------------------------------------
# convolutions


def _check_spatial(x: Tensor, op: str) -> None:
    _, _, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError(f"{op}: zero-extent spatial input {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, mode: str, padding: str = "zero") -> Tensor:
    """2-D convolution restricted to the network's three kernel layouts.

    pointwise_1x1     w: (Cout, Cin, 1, 1), stride 1, no padding
    depthwise_3x3     w: (C, 1, 3, 3), stride 1, padding 1 (zero or reflect)
    strided_2x2_down  w: (Cout, Cin, 2, 2), stride 2, no padding
    """
    if mode not in CONV_MODES:
        raise ShapeError(f"unknown conv mode {mode!r}")
    _check_spatial(x, mode)
    if mode == "pointwise_1x1":
        return _conv_pointwise(x, w, b)
    if mode == "depthwise_3x3":
        return _conv_depthwise(x, w, b, padding)
    return _conv_down(x, w, b)


def _bias_check(b: Tensor | None, cout: int, op: str):
    if b is None:
        return None
    if b.shape != (1, cout, 1, 1):
        raise ShapeError(f"{op}: bias shape {b.shape}, expected (1, {cout}, 1, 1)")
    return b


def _conv_pointwise(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if (kh, kw) != (1, 1) or cin_w != cin:
        raise ShapeError(
            f"pointwise_1x1: weight {w.shape} does not map {cin} input channels"
        )
    b = _bias_check(b, cout, "pointwise_1x1")
    wmat = w.data.reshape(cout, cin)
    xr = x.data.reshape(n, cin, h * wd)
    y = (wmat @ xr).reshape(n, cout, h, wd)
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gr = g.reshape(n, cout, h * wd)
        gx = (wmat.T @ gr).reshape(n, cin, h, wd)
        gw = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, 1, 1)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, bwd)


def _pad1(arr: np.ndarray, padding: str) -> np.ndarray:
    n, c, h, w = arr.shape
    if padding == "reflect":
        return np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    out = np.zeros((n, c, h + 2, w + 2), dtype=arr.dtype)
    out[:, :, 1 : h + 1, 1 : w + 1] = arr
    return out


def _reflect_fold(gp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Fold gradients of a 1-pixel reflect pad back onto the source."""
    rows = gp[:, :, 1 : h + 1, :].copy()
    rows[:, :, 1, :] += gp[:, :, 0, :]
    rows[:, :, h - 2, :] += gp[:, :, h + 1, :]
    gx = rows[:, :, :, 1 : w + 1].copy()
    gx[:, :, :, 1] += rows[:, :, :, 0]
    gx[:, :, :, w - 2] += rows[:, :, :, w + 1]
    return gx


def _conv_depthwise(x: Tensor, w: Tensor, b: Tensor | None, padding: str) -> Tensor:
    n, c, h, wd = x.shape
    if w.shape != (c, 1, 3, 3):
        raise ShapeError(
            f"depthwise_3x3: weight {w.shape}, expected ({c}, 1, 3, 3) "
            "(output channels must equal input channels)"
        )
    b = _bias_check(b, c, "depthwise_3x3")
    if padding == "reflect" and (h < 2 or wd < 2):
        raise ShapeError(f"reflect padding needs spatial extents >= 2, got {x.shape}")
    if padding not in ("zero", "reflect"):
        raise ShapeError(f"unknown padding {padding!r}")
    xp = _pad1(x.data, padding)
    wk = w.data[:, 0]  # (C, 3, 3)

    def correlate(src, kern, oh, ow):
        out = np.zeros((n, c, oh, ow), dtype=np.float32)
        tmp = np.empty_like(out)
        for dy in range(3):
            for dx in range(3):
                np.multiply(
                    src[:, :, dy : dy + oh, dx : dx + ow],
                    kern[:, dy, dx][None, :, None, None],
                    out=tmp,
                )
                out += tmp
        return out

    y = correlate(xp, wk, h, wd)
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        flipped = np.ascontiguousarray(wk[:, ::-1, ::-1])
        if padding == "zero":
            gx = correlate(_pad1(g, "zero"), flipped, h, wd)
        else:
            # gradient wrt the padded tensor (full correlation over a 2-pad),
            # then fold the reflected border taps back onto their sources
            gp = np.zeros((n, c, h + 4, wd + 4), dtype=np.float32)
            gp[:, :, 2 : h + 2, 2 : wd + 2] = g
            dxp = correlate(gp, flipped, h + 2, wd + 2)
            gx = _reflect_fold(dxp, h, wd)
        gw = np.empty_like(w.data)
        for dy in range(3):
            for dx in range(3):
                gw[:, 0, dy, dx] = np.einsum(
                    "nchw,nchw->c", g, xp[:, :, dy : dy + h, dx : dx + wd]
                )
        gb = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, bwd)


def _conv_down(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if (kh, kw) != (2, 2) or cin_w != cin:
        raise ShapeError(
            f"strided_2x2_down: weight {w.shape} does not map {cin} input channels"
        )
    if h % 2 or wd % 2:
        raise ShapeError(f"strided_2x2_down: spatial extents must be even, got {x.shape}")
    b = _bias_check(b, cout, "strided_2x2_down")
    h2, w2 = h // 2, wd // 2
    xr = x.data.reshape(n, cin, h2, 2, w2, 2).transpose(0, 2, 4, 1, 3, 5)
    xmat = np.ascontiguousarray(xr).reshape(n * h2 * w2, cin * 4)
    wmat = w.data.reshape(cout, cin * 4)
    y = xmat @ wmat.T
    y = np.ascontiguousarray(y.reshape(n, h2, w2, cout).transpose(0, 3, 1, 2))
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gxm = gt @ wmat
        gx = gxm.reshape(n, h2, w2, cin, 2, 2).transpose(0, 3, 1, 4, 2, 5)
        gx = np.ascontiguousarray(gx).reshape(n, cin, h, wd)
        gw = (gt.T @ xmat).reshape(cout, cin, 2, 2)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# normalization / gating / attention


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the channel vector at every (batch, y, x) site, then affine."""
    if eps <= 0:
        raise ShapeError(f"layer norm eps must be positive, got {eps}")
    n, c, h, w = x.shape
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(
            f"layer norm scale/shift must be (1, {c}, 1, 1), got {gamma.shape} / {beta.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(g):
        gxh = g * gamma.data
        m1 = gxh.mean(axis=1, keepdims=True)
        m2 = (gxh * xhat).mean(axis=1, keepdims=True)
        gx = (gxh - m1 - xhat * m2) * inv
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gbeta = g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        return (gx, ggamma, gbeta)

    return _record(out, (x, gamma, beta), bwd)


def simple_gate(x: Tensor) -> Tensor:
    """Split channels in half and multiply the halves elementwise."""
    n, c, h, w = x.shape
    if c % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {c}")
    half = c // 2
    a = x.data[:, :half]
    b = x.data[:, half:]
    out = Tensor(a * b)

    def bwd(g):
        return (np.concatenate((g * b, g * a), axis=1),)

    return _record(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_spatial(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    inv = np.float32(1.0 / (h * w))

    def bwd(g):
        return (np.broadcast_to(g * inv, x.shape),)

    return _record(out, (x,), bwd)


def simplified_channel_attention(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Rescale each channel by a pooled, pointwise-transformed statistic.

    out = x * pointwise(global_avg_pool(x)); the pointwise conv must map
    C channels to C channels.
    """
    c = x.shape[1]
    if w.shape[0] != c or w.shape[1] != c:
        raise ShapeError(f"sca weight {w.shape} must map {c} channels to {c}")
    att = _conv_pointwise(global_avg_pool(x), w, b)
    return mul(x, att)


def pixel_shuffle(x: Tensor, direction: str, r: int = 2) -> Tensor:
    """Move data between channels and space; ``down`` is the exact inverse of ``up``."""
    n, c, h, w = x.shape
    if direction == "up":
        if c % (r * r):
            raise ShapeError(f"pixel_shuffle up needs channels divisible by {r * r}, got {c}")
        cd = c // (r * r)
        y = x.data.reshape(n, cd, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
        out = Tensor(np.ascontiguousarray(y).reshape(n, cd, h * r, w * r))

        def bwd(g):
            gr = g.reshape(n, cd, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
            return (np.ascontiguousarray(gr).reshape(n, c, h, w),)

        return _record(out, (x,), bwd)
    if direction == "down":
        if h % r or w % r:
            raise ShapeError(
                f"pixel_shuffle down needs spatial extents divisible by {r}, got {x.shape}"
            )
        hd, wd = h // r, w // r
        y = x.data.reshape(n, c, hd, r, wd, r).transpose(0, 1, 3, 5, 2, 4)
        out = Tensor(np.ascontiguousarray(y).reshape(n, c * r * r, hd, wd))

        def bwd(g):
            gr = g.reshape(n, c, r, r, hd, wd).transpose(0, 1, 4, 2, 5, 3)
            return (np.ascontiguousarray(gr).reshape(n, c, h, w),)

        return _record(out, (x,), bwd)
    raise ShapeError(f"pixel_shuffle direction must be 'up' or 'down', got {direction!r}")


# ---------------------------------------------------------------------------
# softmax


def softmax(v) -> np.ndarray:
    """Stable softmax of a plain vector; returns a float64 probability vector."""
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ShapeError("softmax of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("softmax input must be finite")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis (used on (N, C, 1, 1) logit tensors)."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)
