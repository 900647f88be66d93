"""Synthetic instrument-like video with exact masks and exact dense flow.

Each instrument is a rigid body (capsule shaft, wrist band, jaw wedge) drawn
in its own local frame and placed on the canvas by a per-frame similarity
transform ``p = centre_t + scale_t * R(angle_t) @ q``. Because the transforms
are known, the flow between consecutive frames is analytic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from mftap.errors import SpecValidationError
from mftap.flow import FlowField

TASK_CLASSES = {"binary": 2, "part": 4, "type": 4}

SHAFT, WRIST, JAW = 1, 2, 3
_SUPERSAMPLE = 4
_MARGIN = 2.0

# base RGB per instrument type; parts are shaded from it
_TYPE_COLORS = {
    1: np.array([0.78, 0.80, 0.84]),
    2: np.array([0.55, 0.58, 0.66]),
    3: np.array([0.86, 0.82, 0.62]),
}
_TYPE_WIDTH = {1: 1.0, 2: 0.8, 3: 1.2}


@dataclass(frozen=True)
class InstrumentSpec:
    type_id: int = 1
    center: tuple[float, float] = (32.0, 32.0)
    angle: float = 0.0  # degrees, direction the jaws point to
    shaft_length: float = 22.0
    half_width: float = 4.0
    wrist_length: float = 4.0
    jaw_length: float = 7.0
    velocity: tuple[float, float] = (0.0, 0.0)
    amplitude: tuple[float, float] = (0.0, 0.0)
    period: float = 16.0
    phase: float = 0.0
    rotation_amplitude: float = 0.0  # degrees
    zoom_amplitude: float = 0.0

    def corners(self) -> np.ndarray:
        """Local-frame corners (along, across) of a box enclosing every part at unit scale."""
        hw = self.half_width * _TYPE_WIDTH[self.type_id]
        total = self.shaft_length + self.wrist_length + self.jaw_length
        a0, a1 = -total / 2.0 - hw, total / 2.0
        r = hw * 1.15
        return np.array([[a0, -r], [a0, r], [a1, -r], [a1, r]])

    def pose(self, t: int) -> tuple[float, float, float, float]:
        """(cx, cy, angle_deg, scale) at frame ``t``."""
        w = 2.0 * math.pi / self.period
        s = math.sin(w * t + self.phase)
        return (
            self.center[0] + self.velocity[0] * t + self.amplitude[0] * s,
            self.center[1] + self.velocity[1] * t + self.amplitude[1] * math.sin(w * t + self.phase + 0.7),
            self.angle + self.rotation_amplitude * math.sin(w * t + self.phase + 1.3),
            1.0 + self.zoom_amplitude * math.sin(w * t + self.phase + 2.1),
        )


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    frames: int = 30
    seed: int = 0
    instruments: tuple[InstrumentSpec, ...] = ()
    background_drift: tuple[float, float] = (0.0, 0.0)
    camera_pan: tuple[float, float] = (0.0, 0.0)
    pan_period: int = 8
    noise: float = 0.03
    lighting: float = 0.15
    dim_probability: float = 0.0
    dim_gain: float = 0.35
    name: str = "scene"


@dataclass
class VideoSequence:
    name: str
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    masks: dict[str, np.ndarray]  # task -> (T, H, W) uint8
    flows: list[FlowField]  # flows[t - 1] maps frame t-1 to frame t
    labeled: np.ndarray = field(default=None)  # (T,) bool

    def __post_init__(self):
        if self.labeled is None:
            self.labeled = np.ones(len(self.frames), dtype=bool)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:3]


def camera_offset(spec: SceneSpec, t: int) -> np.ndarray:
    """Cumulative camera displacement; the pan reverses every ``pan_period`` frames."""
    pan = np.asarray(spec.camera_pan, dtype=np.float64)
    if not pan.any():
        return np.zeros(2)
    total = np.zeros(2)
    for k in range(1, t + 1):
        total += pan if ((k - 1) // spec.pan_period) % 2 == 0 else -pan
    return total


def _transform(inst: InstrumentSpec, spec: SceneSpec, t: int) -> tuple[np.ndarray, np.ndarray, float]:
    cx, cy, ang, sc = inst.pose(t)
    centre = np.array([cx, cy]) + camera_offset(spec, t)
    a = math.radians(ang)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return centre, rot, sc


def validate(spec: SceneSpec) -> None:
    if spec.height < 8 or spec.width < 8 or spec.frames < 1:
        raise SpecValidationError("canvas must be at least 8x8 with at least one frame")
    if len(spec.instruments) > 2:
        raise SpecValidationError("at most two instruments are supported")
    if math.hypot(*spec.background_drift) > 1.0 + 1e-9:
        raise SpecValidationError("background drift exceeds 1 px/frame")
    if math.hypot(*spec.camera_pan) > 4.0 + 1e-9:
        raise SpecValidationError("camera pan exceeds 4 px/frame")
    for k, inst in enumerate(spec.instruments):
        if inst.type_id not in _TYPE_COLORS:
            raise SpecValidationError(f"instrument {k}: unknown type id {inst.type_id}")
        prev = None
        for t in range(spec.frames):
            centre, rot, sc = _transform(inst, spec, t)
            pts = centre + sc * (inst.corners() @ rot.T)
            if (
                pts[:, 0].min() < _MARGIN
                or pts[:, 1].min() < _MARGIN
                or pts[:, 0].max() > spec.width - 1 - _MARGIN
                or pts[:, 1].max() > spec.height - 1 - _MARGIN
            ):
                raise SpecValidationError(f"instrument {k} leaves the canvas at frame {t}")
            pose = inst.pose(t)
            if prev is not None:
                step = float(np.linalg.norm(centre - prev[0]))
                if step > 4.0 + 1e-9:
                    raise SpecValidationError(f"instrument {k} moves {step:.2f} px at frame {t}")
                if abs(pose[2] - prev[1][2]) > 5.0 + 1e-9:
                    raise SpecValidationError(f"instrument {k} rotates more than 5 degrees at frame {t}")
                ratio = pose[3] / prev[1][3]
                if not 0.97 - 1e-9 <= ratio <= 1.03 + 1e-9:
                    raise SpecValidationError(f"instrument {k} zoom ratio {ratio:.3f} at frame {t}")
            prev = (centre, pose)


def _local_parts(inst: InstrumentSpec, q: np.ndarray) -> np.ndarray:
    """Part id (0 = outside) for local coordinates ``q`` [..., 2] = (along, across)."""
    s = q[..., 0]
    r = np.abs(q[..., 1])
    hw = inst.half_width * _TYPE_WIDTH[inst.type_id]
    total = inst.shaft_length + inst.wrist_length + inst.jaw_length
    s0 = -total / 2.0
    s_wrist = s0 + inst.shaft_length
    s_jaw = s_wrist + inst.wrist_length
    s_tip = s_jaw + inst.jaw_length

    seg = np.clip(s, s0, s_wrist)
    shaft = (s - seg) ** 2 + r**2 <= hw**2
    shaft &= s <= s_wrist
    wrist = (s > s_wrist) & (s <= s_jaw) & (r <= hw * 1.15)
    frac = (s - s_jaw) / inst.jaw_length
    jaw = (s > s_jaw) & (s <= s_tip) & (r <= hw * (1.0 - frac))
    parts = np.zeros(s.shape, dtype=np.uint8)
    parts[shaft] = SHAFT
    parts[wrist] = WRIST
    parts[jaw] = JAW
    return parts


def _to_local(inst: InstrumentSpec, spec: SceneSpec, t: int, pts: np.ndarray) -> np.ndarray:
    centre, rot, sc = _transform(inst, spec, t)
    return ((pts - centre) @ rot) / sc


def _rasterize(spec: SceneSpec, t: int, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Part id and owning-instrument index (-1 = background) at ``pts``; later instruments on top."""
    part = np.zeros(pts.shape[:-1], dtype=np.uint8)
    owner = np.full(pts.shape[:-1], -1, dtype=np.int64)
    for k, inst in enumerate(spec.instruments):
        p = _local_parts(inst, _to_local(inst, spec, t, pts))
        hit = p > 0
        part[hit] = p[hit]
        owner[hit] = k
    return part, owner


def _pixel_grid(h: int, w: int, sub: int = 1) -> np.ndarray:
    off = (np.arange(sub) + 0.5) / sub - 0.5
    ys = (np.arange(h)[:, None] + off[None, :]).ravel()
    xs = (np.arange(w)[:, None] + off[None, :]).ravel()
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def _background_texture(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    base = np.array([0.62, 0.28, 0.25])
    fields = [ndimage.gaussian_filter(rng.standard_normal((h, w)), 3.0, mode="wrap") for _ in range(2)]
    fine = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0, mode="wrap")
    coarse = fields[0] / (fields[0].std() + 1e-12)
    vessel = fields[1] / (fields[1].std() + 1e-12)
    tex = base[None, None, :] + 0.09 * coarse[..., None] * np.array([1.0, 0.7, 0.6])
    tex += 0.05 * fine[..., None] / (fine.std() + 1e-12)
    tex[..., 0] += 0.06 * np.tanh(vessel)
    return tex


def _instrument_shade(inst: InstrumentSpec, parts: np.ndarray, q: np.ndarray) -> np.ndarray:
    col = _TYPE_COLORS[inst.type_id]
    shade = np.where(parts == SHAFT, 1.0, np.where(parts == WRIST, 0.62, 0.85))[..., None] * col
    if inst.type_id == 2:
        stripes = 0.5 + 0.5 * np.cos(q[..., 0] * 1.2)
        shade = shade * (0.85 + 0.15 * stripes)[..., None]
    elif inst.type_id == 3:
        shade = shade * (0.9 + 0.1 * np.cos(q[..., 1] * 1.5))[..., None]
    return shade


def render_frame(spec: SceneSpec, t: int, texture: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    pts = _pixel_grid(h, w, _SUPERSAMPLE)
    bg_off = np.asarray(spec.background_drift) * t + camera_offset(spec, t)
    coords = [pts[..., 1] - bg_off[1], pts[..., 0] - bg_off[0]]
    img = np.stack(
        [ndimage.map_coordinates(texture[..., c], coords, order=1, mode="grid-wrap") for c in range(3)], axis=-1
    )
    for inst in spec.instruments:
        q = _to_local(inst, spec, t, pts)
        parts = _local_parts(inst, q)
        hit = parts > 0
        img[hit] = _instrument_shade(inst, parts, q)[hit]
    # box-filter the supersampled canvas down to pixels
    img = img.reshape(h, _SUPERSAMPLE, w, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    gain = 1.0 + spec.lighting * (rng.random() - 0.5) * 2.0
    noise = spec.noise
    if rng.random() < spec.dim_probability:
        # badly lit frame: washed-out contrast and amplified sensor noise
        mean = img.mean(axis=(0, 1))
        img = mean + spec.dim_gain * (img - mean)
        noise = noise * 2.5
    img = img * gain + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def exact_flow(spec: SceneSpec, t: int) -> FlowField:
    """Flow from frame ``t - 1`` to frame ``t`` at every pixel of frame ``t - 1``."""
    h, w = spec.height, spec.width
    pts = _pixel_grid(h, w)
    bg = (
        np.asarray(spec.background_drift)
        + camera_offset(spec, t)
        - camera_offset(spec, t - 1)
    )
    vec = np.broadcast_to(bg, (h, w, 2)).copy()
    _, owner = _rasterize(spec, t - 1, pts)
    for k, inst in enumerate(spec.instruments):
        sel = owner == k
        if not sel.any():
            continue
        centre, rot, sc = _transform(inst, spec, t)
        centre0, rot0, sc0 = _transform(inst, spec, t - 1)
        if sc == sc0 and np.array_equal(rot, rot0):
            # pure translation: exact, free of round-trip error
            vec[sel] = centre - centre0
            continue
        q = _to_local(inst, spec, t - 1, pts[sel])
        vec[sel] = centre + sc * (q @ rot.T) - pts[sel]
    return FlowField(vec)


def masks_for(spec: SceneSpec, t: int) -> dict[str, np.ndarray]:
    pts = _pixel_grid(spec.height, spec.width)
    part, owner = _rasterize(spec, t, pts)
    types = np.zeros_like(part)
    for k, inst in enumerate(spec.instruments):
        types[owner == k] = inst.type_id
    return {"binary": (part > 0).astype(np.uint8), "part": part, "type": types}


def generate(spec: SceneSpec) -> VideoSequence:
    validate(spec)
    rng = np.random.default_rng(spec.seed)
    texture = _background_texture(spec, rng)
    frames, masks = [], {k: [] for k in TASK_CLASSES}
    flows = []
    for t in range(spec.frames):
        frames.append(render_frame(spec, t, texture, rng))
        for k, m in masks_for(spec, t).items():
            masks[k].append(m)
        if t > 0:
            flows.append(exact_flow(spec, t))
    return VideoSequence(
        name=spec.name,
        frames=np.stack(frames),
        masks={k: np.stack(v) for k, v in masks.items()},
        flows=flows,
    )


def random_instrument(rng: np.random.Generator, spec: SceneSpec) -> InstrumentSpec:
    h, w = spec.height, spec.width
    scale = min(h, w) / 64.0
    return InstrumentSpec(
        type_id=int(rng.integers(1, 4)),
        center=(float(rng.uniform(0.3, 0.7) * w), float(rng.uniform(0.3, 0.7) * h)),
        angle=float(rng.uniform(0, 360)),
        shaft_length=float(rng.uniform(18, 26) * scale),
        half_width=float(rng.uniform(3.5, 5.0) * scale),
        wrist_length=float(rng.uniform(3, 5) * scale),
        jaw_length=float(rng.uniform(5, 8) * scale),
        amplitude=(float(rng.uniform(3, 9) * scale), float(rng.uniform(3, 9) * scale)),
        period=float(rng.uniform(14, 24)),
        phase=float(rng.uniform(0, 2 * math.pi)),
        rotation_amplitude=float(rng.uniform(0, 12)),
        zoom_amplitude=float(rng.uniform(0, 0.06)),
    )


def random_scene(seed: int, frames: int = 30, height: int = 64, width: int = 64, name: str | None = None) -> SceneSpec:
    """Sample a valid scene from the default distribution (1-2 instruments)."""
    rng = np.random.default_rng(seed)
    base = SceneSpec(height=height, width=width, frames=frames, seed=seed, name=name or f"seq{seed:04d}")
    for _ in range(1000):
        count = int(rng.integers(1, 3))
        drift = rng.uniform(-1, 1, size=2) / math.sqrt(2)
        spec = replace(
            base,
            instruments=tuple(random_instrument(rng, base) for _ in range(count)),
            background_drift=(float(drift[0]), float(drift[1])),
        )
        try:
            validate(spec)
        except SpecValidationError:
            continue
        return spec
    raise SpecValidationError(f"could not sample a valid scene for seed {seed}")


def edge_case_suite(frames: int = 30, height: int = 64, width: int = 64, seed: int = 1000) -> list[SceneSpec]:
    """No instrument, a stationary instrument, and a whole-canvas camera pan of 3 px/frame."""
    base = SceneSpec(height=height, width=width, frames=frames, seed=seed)
    still = InstrumentSpec(type_id=1, center=(width / 2, height / 2), angle=30.0)
    panned = InstrumentSpec(type_id=2, center=(width / 2 - 12, height / 2), angle=-60.0, shaft_length=18.0)
    return [
        replace(base, name="no_instrument", background_drift=(0.5, 0.3)),
        replace(base, name="still_instrument", instruments=(still,), background_drift=(0.6, -0.4), seed=seed + 1),
        replace(base, name="camera_pan", instruments=(panned,), camera_pan=(3.0, 0.0), pan_period=4, seed=seed + 2),
    ]
