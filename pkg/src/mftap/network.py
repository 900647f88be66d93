"""Encoder-decoder segmentation network with a prior-driven attention pyramid.

The encoder follows the VGG11 layout (1, 1, 2, 2, 2 convolutions per scale,
each scale closed by a 2x2 max pool) at reduced width. The decoder is a
stack of five attention-guided (AG) stages from the bottleneck up:

    f   = relu(conv1x1(concat(skip, incoming)))
    o   = f + a * f
    a'  = sigmoid(conv3x3(o))           # one channel

``o`` and ``a'`` are upsampled before the next stage. The incoming
attention of the coarsest stage is the temporal prior, average-pooled to the
bottleneck resolution. With ``prior_mode="none"`` every ``a`` is zero and the
attention convolutions are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mftap import autodiff as ad
from mftap.autodiff import Tensor
from mftap.errors import ShapeError

PRIOR_MODES = ("none", "raw", "flow")
ABLATION_NAMES = {"none": "PlainNet", "raw": "TAPNet", "flow": "MF-TAPNet"}
VGG11_CONVS = (1, 1, 2, 2, 2)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 2
    stage_widths: tuple[int, ...] = (8, 16, 32, 32, 32)
    prior_mode: str = "flow"
    upsample_mode: str = "bilinear"
    dtype: str = "float64"

    def __post_init__(self):
        if len(self.stage_widths) != 5:
            raise ValueError("exactly 5 encoder stages are required")
        if any(w <= 0 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError("upsample_mode must be nearest or bilinear")
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))

    @property
    def uses_prior(self) -> bool:
        return self.prior_mode != "none"


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = cfg.in_channels
    for s, (width, n) in enumerate(zip(cfg.stage_widths, VGG11_CONVS), start=1):
        for k in range(n):
            shapes[f"enc{s}.{k}.w"] = (width, cin, 3, 3)
            shapes[f"enc{s}.{k}.b"] = (width,)
            cin = width
    w5 = cfg.stage_widths[4]
    shapes["center.w"] = (w5, w5, 3, 3)
    shapes["center.b"] = (w5,)
    incoming = w5
    for s in range(5, 0, -1):
        width = cfg.stage_widths[s - 1]
        shapes[f"ag{s}.fuse.w"] = (width, cfg.stage_widths[s - 1] + incoming, 1, 1)
        shapes[f"ag{s}.fuse.b"] = (width,)
        if s > 1:
            shapes[f"ag{s}.att.w"] = (1, width, 3, 3)
            shapes[f"ag{s}.att.b"] = (1,)
        incoming = width
    w1 = cfg.stage_widths[0]
    shapes["head.conv.w"] = (w1, w1, 3, 3)
    shapes["head.conv.b"] = (w1,)
    shapes["head.out.w"] = (cfg.num_classes, w1, 1, 1)
    shapes["head.out.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: NetworkConfig, seed: int) -> dict[str, Tensor]:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=cfg.dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(cfg.dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def _conv(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    w = params[prefix + ".w"]
    return ad.conv2d(x, w, params[prefix + ".b"], padding=w.shape[2] // 2)


def encode(frame: Tensor, params: dict[str, Tensor]) -> list[Tensor]:
    """Five feature maps at 1/2, 1/4, ..., 1/32 of the input size."""
    _, _, h, w = frame.shape
    if h % 32 or w % 32:
        raise ShapeError(
            f"input {h}x{w} must be divisible by 32", axis="height" if h % 32 else "width"
        )
    feats = []
    x = frame
    for s, n in enumerate(VGG11_CONVS, start=1):
        for k in range(n):
            x = ad.relu(_conv(x, params, f"enc{s}.{k}"))
        x = ad.maxpool2(x)
        feats.append(x)
    return feats


@dataclass
class AGOutput:
    fused: Tensor
    out: Tensor
    attention: Tensor | None


def ag_module(
    f_low: Tensor,
    f_high: Tensor,
    a_in: Tensor | None,
    params: dict[str, Tensor],
    stage: int,
    emit_attention: bool = True,
) -> AGOutput:
    """One attention-guided stage. ``a_in=None`` means no attention (o = f)."""
    if f_low.shape[2:] != f_high.shape[2:]:
        raise ShapeError(f"AG{stage}: skip {f_low.shape} and incoming {f_high.shape} differ", axis="height")
    f = ad.relu(_conv(ad.concat_channels(f_low, f_high), params, f"ag{stage}.fuse"))
    if a_in is None:
        o = f
    else:
        if a_in.shape[1] != 1 or a_in.shape[2:] != f.shape[2:]:
            raise ShapeError(f"AG{stage}: attention {a_in.shape} does not match {f.shape}", axis="channel")
        o = ad.add(f, ad.mul(f, a_in))
    a_out = None
    if emit_attention and a_in is not None:
        a_out = ad.sigmoid(_conv(o, params, f"ag{stage}.att"))
    return AGOutput(fused=f, out=o, attention=a_out)


@dataclass
class ForwardResult:
    logits: Tensor
    attention: list[np.ndarray] = field(default_factory=list)  # a5 .. a1, coarse to fine


def prior_tensor(prior: np.ndarray, dtype="float64") -> Tensor:
    return Tensor(np.asarray(prior, dtype=dtype)[None, None])


def frame_tensor(frame: np.ndarray, dtype="float64") -> Tensor:
    """(H, W) or (H, W, C) intensities in [0, 1] -> centred [1, C, H, W] tensor."""
    arr = np.asarray(frame, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[..., None]
    return Tensor((arr.transpose(2, 0, 1)[None] - 0.5).astype(dtype))


def forward(
    cfg: NetworkConfig, params: dict[str, Tensor], frame: Tensor, prior: np.ndarray | None = None
) -> ForwardResult:
    _, _, h, w = frame.shape
    feats = encode(frame, params)
    center = ad.relu(_conv(feats[4], params, "center"))

    attn = None
    pyramid: list[np.ndarray] = []
    if cfg.uses_prior:
        if prior is None:
            raise ValueError(f"prior_mode={cfg.prior_mode!r} requires a prior map")
        prior = np.asarray(prior)
        if prior.shape != (h, w):
            raise ShapeError(f"prior {prior.shape} does not match frame {(h, w)}", axis="height")
        attn = ad.avgpool(prior_tensor(prior, frame.dtype), 32)

    up = cfg.upsample_mode
    incoming = center
    for stage in range(5, 0, -1):
        if attn is not None:
            pyramid.append(attn.data[0, 0])
        res = ag_module(feats[stage - 1], incoming, attn, params, stage, emit_attention=stage > 1)
        incoming = ad.upsample2(res.out, up)
        attn = ad.upsample2(res.attention, up) if res.attention is not None else None
    x = ad.relu(_conv(incoming, params, "head.conv"))
    logits = _conv(x, params, "head.out")
    return ForwardResult(logits=logits, attention=pyramid)


class TAPNet:
    """Configuration plus parameters; the unit that trains and checkpoints."""

    def __init__(self, cfg: NetworkConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def __call__(self, frame: Tensor, prior: np.ndarray | None = None) -> ForwardResult:
        return forward(self.cfg, self.params, frame, prior)

    def predict(self, frame: np.ndarray, prior: np.ndarray | None = None) -> np.ndarray:
        """Class probabilities [1, C, H, W] without building a graph."""
        frozen = {k: Tensor(v.data) for k, v in self.params.items()}
        res = forward(self.cfg, frozen, frame_tensor(frame, self.cfg.dtype), prior)
        return ad.softmax_channel(res.logits).data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
