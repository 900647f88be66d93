"""Sequential training with prior circulation, and sequential evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mftap import autodiff as ad
from mftap.autodiff import Tensor
from mftap.errors import DegenerateLossError, NumericError
from mftap.flow import FlowField, collapse_foreground, time_turner
from mftap.losses import class_weights, semi_loss, weighted_ce
from mftap.metrics import MetricReport, aggregate, score_frame
from mftap.network import TAPNet, forward, frame_tensor
from mftap.synth import VideoSequence

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params: dict[str, Tensor], opt: Adam, lr: float | None = None) -> None:
    if lr is not None:
        opt.lr = lr
    opt.step(params)


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 10
    seed: int = 0
    label_interval: int = 1
    semi: bool = False
    beta: float = 1.0
    alpha: tuple[float, ...] | None = None
    dilation_radius: int = 2
    task: str = "binary"


@dataclass
class LossRecord:
    step: int
    frame_index: int
    loss_kind: str
    loss_value: float


@dataclass
class TrainState:
    optimizer: Adam
    step: int = 0
    log: list[LossRecord] = field(default_factory=list)
    skipped: int = 0


def is_labeled(seq: VideoSequence, t: int, interval: int) -> bool:
    return bool(seq.labeled[t]) and t % interval == 0


def make_prior(net: TAPNet, prev_probs: np.ndarray | None, flow: FlowField | None, radius: int, shape) -> np.ndarray | None:
    """Prior for the current frame given the previous frame's class probabilities."""
    mode = net.cfg.prior_mode
    if mode == "none":
        return None
    if prev_probs is None:
        return np.zeros(shape)
    if mode == "raw":
        return collapse_foreground(prev_probs)
    if flow is None:
        raise ValueError("prior_mode='flow' needs a flow field for every adjacent pair")
    return time_turner(prev_probs, flow, radius)


def train_sequence(
    seq: VideoSequence,
    net: TAPNet,
    cfg: TrainConfig,
    state: TrainState,
    alpha: np.ndarray,
    flows: list[FlowField] | None = None,
) -> TrainState:
    """One pass over ``seq`` in temporal order, one optimizer step per scored frame.

    Labeled frames use the weighted cross-entropy; an unlabeled frame whose
    predecessor is labeled uses the reverse-flow loss when ``cfg.semi`` is
    set, otherwise it only feeds the prior chain.
    """
    flows = seq.flows if flows is None else flows
    if len(flows) != len(seq) - 1:
        raise ValueError(f"{seq.name}: expected {len(seq) - 1} flow fields, got {len(flows)}")
    if not is_labeled(seq, 0, cfg.label_interval):
        raise ValueError(f"{seq.name}: the first frame must be labeled")
    masks = seq.masks[cfg.task]
    dtype = net.cfg.dtype
    prev_probs = None
    for t in range(len(seq)):
        flow = flows[t - 1] if t > 0 else None
        prior = make_prior(net, prev_probs, flow, cfg.dilation_radius, seq.shape)
        res = net(frame_tensor(seq.frames[t], dtype), prior)
        prev_probs = ad.softmax_channel(Tensor(res.logits.data)).data

        if is_labeled(seq, t, cfg.label_interval):
            kind, loss = "sup", weighted_ce(res.logits, masks[t], alpha)
        elif cfg.semi and t > 0 and is_labeled(seq, t - 1, cfg.label_interval):
            try:
                kind, loss = "semi", semi_loss(res.logits, flow, masks[t - 1], cfg.beta)
            except DegenerateLossError:
                state.skipped += 1
                continue
        else:
            continue
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"{seq.name} frame {t}: loss is {value}")
        net.zero_grad()
        ad.backward(loss)
        state.optimizer.step(net.params)
        state.log.append(LossRecord(state.step, t, kind, value))
        state.step += 1
    return state


def train(
    sequences: list[VideoSequence],
    net: TAPNet,
    cfg: TrainConfig,
    flows: dict[str, list[FlowField]] | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """``cfg.epochs`` passes over all sequences; sequence order is shuffled per epoch from ``cfg.seed``."""
    num_classes = net.cfg.num_classes
    if cfg.alpha is not None:
        alpha = np.asarray(cfg.alpha, dtype=np.float64)
    else:
        labeled = [
            s.masks[cfg.task][t] for s in sequences for t in range(len(s)) if is_labeled(s, t, cfg.label_interval)
        ]
        alpha = class_weights(labeled, num_classes)
    state = state or TrainState(optimizer=Adam(lr=cfg.lr))
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(sequences))
        for k in order:
            seq = sequences[k]
            train_sequence(seq, net, cfg, state, alpha, flows[seq.name] if flows else None)
        recent = [r.loss_value for r in state.log[-50:]]
        log.info("epoch %d: %d steps, recent loss %.4f", epoch, state.step, float(np.mean(recent)) if recent else float("nan"))
    return state


def write_loss_log(records: list[LossRecord], path: str | Path, append: bool = True) -> None:
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "frame_index", "loss_kind", "loss_value"])
        for r in records:
            w.writerow([r.step, r.frame_index, r.loss_kind, repr(r.loss_value)])


@dataclass
class SequencePrediction:
    labels: np.ndarray  # (T, H, W)
    attention: list[list[np.ndarray]]


def predict_sequence(
    net: TAPNet, seq: VideoSequence, flows: list[FlowField] | None = None, radius: int = 2
) -> SequencePrediction:
    flows = seq.flows if flows is None else flows
    frozen = {k: Tensor(v.data) for k, v in net.params.items()}
    prev_probs = None
    labels, attention = [], []
    for t in range(len(seq)):
        flow = flows[t - 1] if t > 0 else None
        prior = make_prior(net, prev_probs, flow, radius, seq.shape)
        res = forward(net.cfg, frozen, frame_tensor(seq.frames[t], net.cfg.dtype), prior)
        prev_probs = ad.softmax_channel(res.logits).data
        if not np.all(np.isfinite(prev_probs)):
            raise NumericError(f"{seq.name} frame {t}: non-finite prediction")
        labels.append(prev_probs[0].argmax(axis=0).astype(np.uint8))
        attention.append(res.attention)
    return SequencePrediction(np.stack(labels), attention)


def evaluate(
    net: TAPNet,
    sequences: list[VideoSequence],
    task: str = "binary",
    flows: dict[str, list[FlowField]] | None = None,
    radius: int = 2,
    label: str = "",
) -> MetricReport:
    scores = []
    for seq in sequences:
        pred = predict_sequence(net, seq, flows[seq.name] if flows else None, radius)
        gt = seq.masks[task]
        scores.extend(score_frame(pred.labels[t], gt[t], net.cfg.num_classes) for t in range(len(seq)))
    return aggregate(scores, task=task, label=label)
