"""Dense optical flow and time-turner propagation of prediction masks.

Conventions: a flow field is an (H, W, 2) array whose last axis holds
``(dx, dy)`` in pixels. It maps positions in the earlier frame to positions
in the later one. Prior maps are (H, W) float arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from mftap import autodiff as ad
from mftap.errors import ShapeError


@dataclass(frozen=True)
class FlowField:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ShapeError(f"flow vectors must be (H, W, 2), got {v.shape}", axis="component")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow field contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowField:
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def uniform(cls, height: int, width: int, dx: float, dy: float) -> FlowField:
        v = np.empty((height, width, 2))
        v[..., 0] = dx
        v[..., 1] = dy
        return cls(v)


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 3
    smoothness: float = 0.1
    iterations: int = 100
    warps: int = 3
    median_size: int = 5


def reverse_flow(flow: FlowField) -> FlowField:
    return FlowField(-flow.vectors)


def _check_dims(shape: tuple[int, ...], flow: FlowField) -> None:
    if tuple(shape) != flow.shape:
        axis = "height" if shape[0] != flow.height else "width"
        raise ShapeError(f"map of shape {tuple(shape)} does not match flow {flow.shape}", axis=axis)


def _targets(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Flat target index for every source pixel and a validity mask.

    Targets are rounded half-up (``floor(x + 0.5)``) so ties are deterministic.
    """
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.floor(xs + flow.vectors[..., 0] + 0.5).astype(np.int64)
    ty = np.floor(ys + flow.vectors[..., 1] + 0.5).astype(np.int64)
    valid = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    return (ty * w + tx).ravel(), valid.ravel()


def _scatter_max(values: np.ndarray, target: np.ndarray, valid: np.ndarray, size: int):
    """Max-collision scatter of flat ``values``.

    Returns the output array and, per hit target, the winning source index.
    Equal values resolve to the earliest source in row-major order.
    """
    src = np.flatnonzero(valid)
    tgt = target[src]
    vals = values[src]
    out = np.zeros(size, dtype=values.dtype)
    if src.size == 0:
        return out, np.empty(0, np.int64), np.empty(0, np.int64)
    order = np.lexsort((src, -vals, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    win = order[first]
    hit = tgt[win]
    out[hit] = vals[win]
    return out, hit, src[win]


def apply_flow(source: np.ndarray, flow: FlowField) -> np.ndarray:
    """Forward-splat ``source`` along ``flow``.

    Each value at ``u`` lands on ``round(u + d)``; collisions keep the
    maximum, unhit targets are 0, out-of-bounds deposits are dropped.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2:
        raise ShapeError(f"apply_flow expects an (H, W) map, got {source.shape}", axis="ndim")
    _check_dims(source.shape, flow)
    target, valid = _targets(flow)
    out, _, _ = _scatter_max(source.ravel(), target, valid, source.size)
    return out.reshape(source.shape)


def warp_tensor(x: ad.Tensor, flow: FlowField) -> tuple[ad.Tensor, np.ndarray]:
    """Channel-wise forward splat of a [1,C,H,W] tensor with scatter-max.

    Gradient for each hit target flows to its winning source. Also returns
    the (H, W) boolean map of targets that received any deposit.
    """
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"warp_tensor expects [1,C,H,W], got {x.shape}", axis="batch")
    _, c, h, w = x.shape
    _check_dims((h, w), flow)
    target, valid = _targets(flow)
    out = np.zeros_like(x.data)
    routes = []
    for ch in range(c):
        o, hit, win = _scatter_max(x.data[0, ch].ravel(), target, valid, h * w)
        out[0, ch] = o.reshape(h, w)
        routes.append((hit, win))
    landed = np.zeros(h * w, dtype=bool)
    landed[target[valid]] = True

    def _bw(g: np.ndarray):
        gx = np.zeros_like(g)
        for ch, (hit, win) in enumerate(routes):
            flat = gx[0, ch].reshape(-1)
            flat[win] = g[0, ch].reshape(-1)[hit]
        return (gx,)

    return ad._make(out, (x,), _bw, "warp"), landed.reshape(h, w)


def collapse_foreground(probs) -> np.ndarray:
    """Sum of all non-background class probabilities, clamped to [0, 1]."""
    p = probs.data if isinstance(probs, ad.Tensor) else np.asarray(probs)
    if p.ndim != 4 or p.shape[0] != 1:
        raise ShapeError(f"collapse_foreground expects [1,C,H,W], got {p.shape}", axis="batch")
    if p.shape[1] < 2:
        raise ShapeError("collapse_foreground needs at least 2 classes", axis="channel")
    return np.clip(p[0, 1:].sum(axis=0), 0.0, 1.0)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Grey dilation with a (2r+1) square window; windows are clipped at borders."""
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=np.float64)
    if radius == 0:
        return mask.copy()
    # edge replication never exceeds the max over the clipped window
    return ndimage.maximum_filter(mask, size=2 * radius + 1, mode="nearest")


def time_turner(prev_pred, flow: FlowField | None, radius: int) -> np.ndarray:
    """Temporal prior for frame t from the class probabilities of frame t-1.

    ``prev_pred=None`` (no predecessor) gives an all-zero prior; this needs
    ``flow`` for the dimensions.
    """
    if prev_pred is None:
        if flow is None:
            raise ValueError("time_turner needs a flow field or a prediction")
        return np.zeros(flow.shape)
    fg = collapse_foreground(prev_pred)
    if flow is not None:
        fg = apply_flow(fg, flow)
    return np.clip(dilate(fg, radius), 0.0, 1.0)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def to_gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        if frame.shape[2] == 1:
            return frame[..., 0]
        return frame @ np.array([0.299, 0.587, 0.114])
    return frame


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        if min(prev.shape) < 8:
            break
        blurred = ndimage.gaussian_filter(prev, 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr


def _backward_warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [ys + v, xs + u], order=1, mode="nearest")


_AVG_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _refine(i1: np.ndarray, i2: np.ndarray, u: np.ndarray, v: np.ndarray, cfg: FlowConfig):
    for _ in range(cfg.warps):
        i2w = _backward_warp(i2, u, v)
        mid = 0.5 * (i1 + i2w)
        iy, ix = np.gradient(mid)
        it = i2w - i1
        u0, v0 = u.copy(), v.copy()
        # linearised brightness constancy around (u0, v0)
        rhs = it - ix * u0 - iy * v0
        denom = cfg.smoothness + ix * ix + iy * iy
        for _ in range(cfg.iterations):
            ub = ndimage.convolve(u, _AVG_KERNEL, mode="nearest")
            vb = ndimage.convolve(v, _AVG_KERNEL, mode="nearest")
            r = (ix * ub + iy * vb + rhs) / denom
            u = ub - ix * r
            v = vb - iy * r
        if cfg.median_size > 1:
            u = ndimage.median_filter(u, size=cfg.median_size, mode="nearest")
            v = ndimage.median_filter(v, size=cfg.median_size, mode="nearest")
    return u, v


def estimate_flow(prev: np.ndarray, cur: np.ndarray, cfg: FlowConfig | None = None) -> FlowField:
    """Coarse-to-fine Horn-Schunck flow with incremental warping.

    Each frame's gray level is divided by its mean, which cancels global
    lighting changes between frames; ``smoothness`` is relative to gradients
    of that unit-mean image.
    """
    cfg = cfg or FlowConfig()
    if cfg.smoothness <= 0:
        raise ValueError(f"smoothness must be positive, got {cfg.smoothness}")
    if cfg.levels < 1 or cfg.iterations < 1:
        raise ValueError("levels and iterations must be >= 1")
    a, b = to_gray(prev), to_gray(cur)
    if a.shape != b.shape:
        axis = "height" if a.shape[0] != b.shape[0] else "width"
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}", axis=axis)
    a, b = a / max(a.mean(), 1e-6), b / max(b.mean(), 1e-6)
    pa, pb = _pyramid(a, cfg.levels), _pyramid(b, cfg.levels)
    u = np.zeros(pa[-1].shape)
    v = np.zeros(pa[-1].shape)
    for lvl in range(len(pa) - 1, -1, -1):
        shape = pa[lvl].shape
        if u.shape != shape:
            zoom = (shape[0] / u.shape[0], shape[1] / u.shape[1])
            u = ndimage.zoom(u, zoom, order=1, mode="nearest", grid_mode=True) * zoom[1]
            v = ndimage.zoom(v, zoom, order=1, mode="nearest", grid_mode=True) * zoom[0]
        u, v = _refine(pa[lvl], pb[lvl], u, v, cfg)
    return FlowField(np.stack([u, v], axis=-1))


def endpoint_error(est: FlowField, ref: FlowField, mask: np.ndarray | None = None) -> float:
    d = np.linalg.norm(est.vectors - ref.vectors, axis=-1)
    if mask is not None:
        d = d[mask]
    return float(d.mean())
