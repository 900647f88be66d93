"""Supervised weighted cross-entropy and the reverse-flow semi-supervised loss."""

from __future__ import annotations

import numpy as np

from mftap import autodiff as ad
from mftap.autodiff import Tensor
from mftap.errors import DegenerateLossError, ShapeError
from mftap.flow import FlowField, reverse_flow, warp_tensor


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.data.ndim != 4 or logits.shape[0] != 1:
        raise ShapeError(f"logits must be [1,C,H,W], got {logits.shape}", axis="batch")
    if labels.shape != logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape[2:]}", axis="height")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label ids must lie in [0, {c - 1}]")
    return labels.astype(np.int64)


def weighted_ce(logits: Tensor, labels: np.ndarray, alpha) -> Tensor:
    """Mean over pixels of ``-alpha[y] * log softmax(logits)[y]``."""
    labels = _check_labels(logits, labels)
    c = logits.shape[1]
    alpha = np.asarray(alpha, dtype=logits.dtype)
    if alpha.shape != (c,):
        raise ValueError(f"alpha needs {c} entries, got {alpha.shape}")
    logp = ad.log_softmax_channel(logits.data)[0]
    picked = np.take_along_axis(logp, labels[None], axis=0)[0]
    w = alpha[labels]
    n = labels.size
    value = np.array([-(w * picked).sum() / n], dtype=logits.dtype)

    def _bw(g: np.ndarray):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[None], np.take_along_axis(grad, labels[None], axis=0) - 1.0, axis=0)
        return ((grad * w[None] * (g[0] / n))[None],)

    return ad._make(value, (logits,), _bw, "weighted_ce")


def semi_loss(logits_t: Tensor, flow: FlowField, label_prev: np.ndarray, beta: float = 1.0) -> Tensor:
    """Cross-entropy of the reverse-warped prediction of frame t against the label of frame t-1.

    ``flow`` is the (t-1 -> t) field; its negation carries frame t back. Each
    class channel is splatted with max-collision, renormalised to a
    distribution where mass landed, and scored only on those pixels.
    Gradient reaches ``logits_t`` through the scatter.
    """
    labels = _check_labels(logits_t, label_prev)
    probs = ad.softmax_channel(logits_t)
    warped, landed = warp_tensor(probs, reverse_flow(flow))
    n_hit = int(landed.sum())
    if n_hit == 0:
        raise DegenerateLossError("reverse warp left every pixel empty")
    c = logits_t.shape[1]
    dtype = logits_t.dtype
    unhit = Tensor((~landed).astype(dtype)[None, None])
    total = ad.add(ad.channel_sum(warped), unhit)
    normed = ad.div(warped, total)
    onehot = np.zeros((1, c) + labels.shape, dtype=dtype)
    np.put_along_axis(onehot[0], labels[None], 1.0, axis=0)
    picked = ad.channel_sum(ad.mul(normed, Tensor(onehot)))
    logp = ad.log(ad.add(picked, unhit))
    nll = ad.sum_all(ad.mul(logp, Tensor(landed.astype(dtype)[None, None])))
    # beta applied last so scaling it scales the loss exactly
    return ad.scale(ad.scale(nll, -1.0 / n_hit), beta)


def class_weights(label_masks, num_classes: int) -> np.ndarray:
    """Inverse pixel frequency per class, normalised to mean 1.

    Classes never seen get the weight of a class seen once.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for m in label_masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    counts = np.maximum(counts, 1.0)
    inv = counts.sum() / counts
    return inv / inv.mean()
