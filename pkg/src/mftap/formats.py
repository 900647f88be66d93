"""On-disk formats: Middlebury ``.flo``, binary PGM/PPM, checkpoints, manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mftap.errors import CheckpointError, FlowFormatError, ImageFormatError
from mftap.flow import FlowField

FLO_MAGIC = b"PIEH"  # 202021.25 as a little-endian float32
_MAX_FLO_PIXELS = 1 << 28


def flo_bytes(field: FlowField) -> bytes:
    h, w = field.shape
    body = np.ascontiguousarray(field.vectors, dtype="<f4").tobytes()
    return FLO_MAGIC + struct.pack("<ii", w, h) + body


def write_flo(field: FlowField, path: str | Path) -> None:
    Path(path).write_bytes(flo_bytes(field))


def parse_flo(raw: bytes) -> FlowField:
    if len(raw) < 12:
        raise FlowFormatError(f"truncated header: {len(raw)} bytes")
    if raw[:4] != FLO_MAGIC:
        raise FlowFormatError(f"bad magic {raw[:4]!r}, expected {FLO_MAGIC!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w <= 0 or h <= 0 or w * h > _MAX_FLO_PIXELS:
        raise FlowFormatError(f"implausible dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FlowFormatError(f"truncated payload: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise FlowFormatError(f"{len(raw) - need} trailing bytes after payload")
    vec = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(vec.astype(np.float64))


def read_flo(path: str | Path) -> FlowField:
    return parse_flo(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PGM / PPM (P5 / P6, maxval 255)
# ---------------------------------------------------------------------------


def _to_bytes(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.integer):
        if img.min(initial=0) < 0 or img.max(initial=0) > 255:
            raise ImageFormatError("integer image values must lie in [0, 255]")
        return img.astype(np.uint8)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    """Float images in [0, 1] map linearly to 0..255; integer images are written as-is."""
    data = _to_bytes(img)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write image of shape {data.shape}")
    h, w = data.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes())


def _header_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pnm(path: str | Path, as_float: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = _header_tokens(raw, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad header: {exc}") from None
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(raw) - pos < need:
        raise ImageFormatError("truncated raster")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    data = data.reshape((h, w, 3) if ch == 3 else (h, w))
    return data.astype(np.float64) / 255.0 if as_float else data.copy()


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_pnm(path, np.asarray(mask, dtype=np.uint8))


def read_mask(path: str | Path) -> np.ndarray:
    return read_pnm(path, as_float=False)


def write_overlay(path: str | Path, frame: np.ndarray, mask: np.ndarray, heat: np.ndarray | None = None) -> None:
    """Frame with predicted foreground tinted green; an optional heat map (e.g. attention) tints red."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img.copy()
    fg = np.asarray(mask) > 0
    img[fg] = 0.5 * img[fg] + 0.5 * np.array([0.0, 1.0, 0.0])
    if heat is not None:
        hm = np.asarray(heat, dtype=np.float64)
        if hm.shape != img.shape[:2]:
            rep = img.shape[0] // hm.shape[0]
            hm = np.kron(hm, np.ones((rep, rep)))
        img[..., 0] = np.clip(img[..., 0] + 0.5 * hm, 0, 1)
    write_pnm(path, img)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MFTPCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict | None = None  # {"t", "lr", "beta1", "beta2", "eps"}
    moments: dict[str, tuple[np.ndarray, np.ndarray]] | None = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.tensors)
    header = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names],
        "optimizer": ckpt.optimizer,
        "moments": ckpt.moments is not None,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(ckpt.tensors[n], dtype="<f8").tobytes())
    if ckpt.moments is not None:
        for n in names:
            m, v = ckpt.moments[n]
            parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < len(CKPT_MAGIC) + 8 + 32:
        raise CheckpointError("file too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    if body[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {body[:8]!r}")
    version, hlen = struct.unpack("<II", body[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    try:
        header = json.loads(body[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    pos = 16 + hlen

    def take(shape) -> np.ndarray:
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(body):
            raise CheckpointError("truncated tensor payload")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
        return arr

    tensors = {t["name"]: take(tuple(t["shape"])) for t in header["tensors"]}
    moments = None
    if header.get("moments"):
        moments = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            moments[t["name"]] = (take(shape), take(shape))
    if pos != len(body):
        raise CheckpointError("unexpected trailing payload")
    return Checkpoint(header["config"], tensors, header["step"], header["optimizer"], moments)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
