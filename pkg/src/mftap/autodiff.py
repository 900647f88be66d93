"""Minimal reverse-mode automatic differentiation over dense NCHW arrays.

Only the operations the segmentation network needs are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure that
maps the output gradient to parent gradients. ``backward`` walks the graph
once in reverse topological order and sums contributions over paths.

Broadcasting is deliberately limited to one case: a single-channel operand
duplicated across the channels of the other operand.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mftap.errors import ShapeError

DEFAULT_DTYPE = np.float64


class Tensor:
    """Dense real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        dtype=None,
        name: str | None = None,
        _parents: tuple[Tensor, ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, op=op)


def _check_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.data.ndim != ndim:
        raise ShapeError(f"{what} expects a {ndim}-d tensor, got shape {t.shape}", axis="ndim")


# ---------------------------------------------------------------------------
# convolution / pooling / resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw]."""
    _check_ndim(x, 4, "conv2d input")
    _check_ndim(weight, 4, "conv2d kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = weight.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}", axis="channel")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {kh}x{kw} must be odd", axis="kernel")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}", axis="stride")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)", axis="bias")
    for axis_name, size, k in (("height", h, kh), ("width", w, kw)):
        span = size + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(
                f"conv2d: {axis_name} {size} with kernel {k}, padding {padding}, stride {stride} "
                "does not tile evenly",
                axis=axis_name,
            )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, Cin, kh, kw) -> rows of patches
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def _bw(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(np.ascontiguousarray(out), parents, _bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Gradient goes to the first maximum in row-major order."""
    _check_ndim(x, 4, "maxpool2")
    n, c, h, w = x.shape
    if h % 2:
        raise ShapeError(f"maxpool2: odd height {h}", axis="height")
    if w % 2:
        raise ShapeError(f"maxpool2: odd width {w}", axis="width")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)  # argmax returns the first occurrence
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g: np.ndarray):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), _bw, "maxpool2")


def avgpool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` mean pool."""
    _check_ndim(x, 4, "avgpool")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avgpool: {h}x{w} not divisible by {factor}", axis="height" if h % factor else "width")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def _bw(g: np.ndarray):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) / (factor * factor)
        return (gx,)

    return _make(out, (x,), _bw, "avgpool")


def _bilinear_matrix(size: int, dtype) -> np.ndarray:
    """Interpolation matrix of shape (2*size, size), half-pixel centres."""
    m = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = (o + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample2(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double H and W. Bilinear follows the align_corners=False convention:
    output pixel ``o`` samples source coordinate ``(o + 0.5) / 2 - 0.5``,
    clamped to the valid range (edge replication)."""
    _check_ndim(x, 4, "upsample2")
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def _bw(g: np.ndarray):
            n, c, h2, w2 = g.shape
            return (g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

        return _make(out, (x,), _bw, "upsample_nearest")
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    _, _, h, w = x.shape
    mh = _bilinear_matrix(h, x.dtype)
    mw = _bilinear_matrix(w, x.dtype)
    out = np.einsum("ph,nchw,qw->ncpq", mh, x.data, mw, optimize=True)

    def _bw(g: np.ndarray):
        return (np.einsum("ph,ncpq,qw->nchw", mh, g, mw, optimize=True),)

    return _make(out, (x,), _bw, "upsample_bilinear")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) even where the exact value rounds to 0 or 1
    fi = np.finfo(out.dtype)
    out = np.clip(out, fi.tiny, 1.0 - fi.epsneg)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def _channel_broadcast(a: Tensor, b: Tensor) -> bool:
    """True if ``b`` is [N,1,H,W] and duplicates across ``a``'s channels."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 4 and b.data.ndim == 4 and b.shape[1] == 1 and (a.shape[0], a.shape[2], a.shape[3]) == (
        b.shape[0],
        b.shape[2],
        b.shape[3],
    ):
        return True
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}", axis="channel")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _channel_broadcast(a, b)

    def _bw(g: np.ndarray):
        return g, (g.sum(axis=1, keepdims=True) if bc else g)

    return _make(a.data + b.data, (a, b), _bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _channel_broadcast(a, b)
    ad, bd = a.data, b.data

    def _bw(g: np.ndarray):
        ga = g * bd if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * ad
            if bc:
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _make(ad * bd, (a, b), _bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _channel_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def _bw(g: np.ndarray):
        ga = g / bd if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = -g * out / bd
            if bc:
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _make(out, (a, b), _bw, "div")


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_ndim(a, 4, "concat_channels")
    _check_ndim(b, 4, "concat_channels")
    for ax, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat_channels: {name} {a.shape[ax]} != {b.shape[ax]}", axis=name)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _check_ndim(x, 4, "channel_slice")

    def _bw(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(x.data[:, start:stop].copy(), (x,), _bw, "channel_slice")


def channel_sum(x: Tensor) -> Tensor:
    _check_ndim(x, 4, "channel_sum")
    c = x.shape[1]
    return _make(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, c, axis=1),), "channel_sum")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0], dtype=g.dtype),), "sum")


def softmax_channel(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, stabilised by max subtraction."""
    _check_ndim(logits, 4, "softmax_channel")
    if logits.shape[1] < 2:
        raise ShapeError("softmax_channel needs at least 2 channels", axis="channel")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def _bw(g: np.ndarray):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), _bw, "softmax")


def log_softmax_channel(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def topological_order(sink: Tensor) -> list[Tensor]:
    """Nodes reachable from ``sink`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(sink, False)]
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
    return order


def backward(sink: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``sink``.

    Leaf gradients accumulate into any existing ``.grad``; intermediate
    gradients are freed once propagated.
    """
    if sink.data.size != 1:
        raise ShapeError(f"backward needs a scalar sink, got shape {sink.shape}", axis="sink")
    if not sink.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(sink): np.ones(sink.shape, dtype=sink.dtype)}
    for node in reversed(topological_order(sink)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
