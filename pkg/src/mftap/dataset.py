"""Datasets on disk: frames, masks, ground-truth flow and a plain-text manifest.

Manifest format, one line per frame, whitespace separated, paths relative to
the manifest's directory and ``-`` for absent entries::

    # sequence split frame image mask_binary mask_part mask_type gt_flow labeled
    seq0000 train 0 seq0000/frame_000.ppm seq0000/binary_000.pgm ... - 1

``gt_flow`` on frame ``t`` holds the (t-1 -> t) field.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mftap.errors import ImageFormatError
from mftap.flow import FlowConfig, FlowField, estimate_flow
from mftap.formats import read_flo, read_mask, read_pnm, write_flo, write_mask, write_pnm
from mftap.synth import TASK_CLASSES, VideoSequence

MANIFEST_HEADER = "# sequence split frame image mask_binary mask_part mask_type gt_flow labeled"
_TASKS = tuple(TASK_CLASSES)


class DataError(RuntimeError):
    """Missing or inconsistent files on disk."""


@dataclass
class ManifestEntry:
    sequence: str
    split: str
    frame: int
    image: str
    masks: dict[str, str]
    gt_flow: str
    labeled: bool


def write_sequence(seq: VideoSequence, root: Path, split: str, label_interval: int = 1) -> list[str]:
    d = root / seq.name
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in range(len(seq)):
        img = f"{seq.name}/frame_{t:03d}.ppm"
        write_pnm(root / img, seq.frames[t])
        masks = []
        for task in _TASKS:
            rel = f"{seq.name}/{task}_{t:03d}.pgm"
            write_mask(root / rel, seq.masks[task][t])
            masks.append(rel)
        flo = "-"
        if t > 0:
            flo = f"{seq.name}/gtflow_{t:03d}.flo"
            write_flo(seq.flows[t - 1], root / flo)
        labeled = int(bool(seq.labeled[t]) and t % label_interval == 0)
        lines.append(" ".join([seq.name, split, str(t), img, *masks, flo, str(labeled)]))
    return lines


def write_dataset(splits: dict[str, list[VideoSequence]], root: str | Path, label_interval: int = 1) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for split, seqs in splits.items():
        for seq in seqs:
            lines.extend(write_sequence(seq, root, split, label_interval))
    path = root / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 9:
            raise DataError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        name, split, frame, image, mb, mp, mt, flo, labeled = parts
        try:
            entries.append(
                ManifestEntry(name, split, int(frame), image, dict(zip(_TASKS, (mb, mp, mt))), flo, labeled == "1")
            )
        except ValueError:
            raise DataError(f"{path}:{lineno}: frame index {frame!r} is not an integer") from None
    return entries


def _load(root: Path, rel: str, reader):
    if rel == "-":
        return None
    p = root / rel
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    try:
        return reader(p)
    except (ImageFormatError, ValueError) as exc:
        raise DataError(f"{p}: {exc}") from None


def load_sequences(manifest: str | Path, split: str | None = None) -> list[VideoSequence]:
    """Sequences listed in ``manifest`` (optionally one split), with ground-truth flow when present."""
    manifest = Path(manifest)
    root = manifest.parent
    grouped: OrderedDict[str, list[ManifestEntry]] = OrderedDict()
    for e in read_manifest(manifest):
        if split is None or e.split == split:
            grouped.setdefault(e.sequence, []).append(e)
    if not grouped:
        raise DataError(f"no frames for split {split!r} in {manifest}")
    seqs = []
    for name, entries in grouped.items():
        entries.sort(key=lambda e: e.frame)
        if [e.frame for e in entries] != list(range(len(entries))):
            raise DataError(f"{name}: frame indices are not contiguous from 0")
        frames = np.stack([_load(root, e.image, read_pnm) for e in entries])
        masks = {}
        for task in _TASKS:
            loaded = [_load(root, e.masks[task], read_mask) for e in entries]
            if all(m is not None for m in loaded):
                masks[task] = np.stack(loaded)
        flows = [_load(root, e.gt_flow, read_flo) for e in entries[1:]]
        seqs.append(
            VideoSequence(
                name=name,
                frames=frames,
                masks=masks,
                flows=flows if all(f is not None for f in flows) else [],
                labeled=np.array([e.labeled for e in entries]),
            )
        )
    return seqs


def flow_cache_path(cache: str | Path, seq_name: str, t: int) -> Path:
    return Path(cache) / seq_name / f"flow_{t:03d}.flo"


def estimate_sequence_flows(seq: VideoSequence, cfg: FlowConfig | None = None) -> list[FlowField]:
    return [estimate_flow(seq.frames[t - 1], seq.frames[t], cfg) for t in range(1, len(seq))]


def write_flow_cache(cache: str | Path, seq_name: str, flows: list[FlowField]) -> None:
    for t, f in enumerate(flows, start=1):
        p = flow_cache_path(cache, seq_name, t)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_flo(f, p)


def read_flow_cache(cache: str | Path, seq: VideoSequence) -> list[FlowField]:
    flows = []
    for t in range(1, len(seq)):
        p = flow_cache_path(cache, seq.name, t)
        if not p.is_file():
            raise DataError(f"flow cache entry missing: {p}")
        flows.append(read_flo(p))
    return flows
