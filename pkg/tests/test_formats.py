from pathlib import Path

import numpy as np
import pytest

from mftap.errors import CheckpointError, FlowFormatError, ImageFormatError
from mftap.flow import FlowField
from mftap.formats import (
    Checkpoint,
    checkpoint_bytes,
    flo_bytes,
    load_checkpoint,
    parse_checkpoint,
    parse_flo,
    read_flo,
    read_mask,
    read_pnm,
    save_checkpoint,
    write_flo,
    write_mask,
    write_overlay,
    write_pnm,
)

GOLDEN = Path(__file__).parent / "golden"

# hand-encoded: magic, width 2, height 2, then (dx, dy) float32 pairs row by row
FLO_2X2_HEX = (
    "50494548" "02000000" "02000000"
    "0000803f" "000000bf" "0000803e" "00000040"
    "000040c0" "00000000" "0000c03f" "0000a0bf"
)
FLO_2X2 = np.array([[[1.0, -0.5], [0.25, 2.0]], [[-3.0, 0.0], [1.5, -1.25]]])


def test_flo_golden():
    raw = (GOLDEN / "flow_2x2.flo").read_bytes()
    assert raw == bytes.fromhex(FLO_2X2_HEX)
    assert np.array_equal(read_flo(GOLDEN / "flow_2x2.flo").vectors, FLO_2X2)
    assert flo_bytes(FlowField(FLO_2X2)) == raw


def test_flo_round_trip(tmp_path, rng):
    f = FlowField(rng.standard_normal((7, 5, 2)).astype(np.float32).astype(np.float64))
    write_flo(f, tmp_path / "a.flo")
    g = read_flo(tmp_path / "a.flo")
    assert np.array_equal(f.vectors, g.vectors)
    write_flo(g, tmp_path / "b.flo")
    assert (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes()


@pytest.mark.parametrize(
    "mutate",
    [
        lambda r: b"PIEX" + r[4:],
        lambda r: r[:-3],
        lambda r: r[:10],
        lambda r: r + b"\0",
        lambda r: r[:4] + (0).to_bytes(4, "little") + r[8:],
    ],
    ids=["magic", "truncated", "short_header", "trailing", "zero_width"],
)
def test_flo_rejects(mutate):
    with pytest.raises(FlowFormatError):
        parse_flo(mutate(bytes.fromhex(FLO_2X2_HEX)))


def test_pnm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 6, 3)).astype(np.uint8)
    write_pnm(tmp_path / "a.ppm", rgb)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n6 5\n255\n")
    assert np.array_equal(read_pnm(tmp_path / "a.ppm", as_float=False), rgb)
    mask = rng.integers(0, 4, (4, 3))
    write_mask(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), mask)
    gray = np.array([[0.0, 0.5, 1.0]])
    write_pnm(tmp_path / "g.pgm", gray)
    assert read_pnm(tmp_path / "g.pgm", as_float=False).tolist() == [[0, 128, 255]]


def test_pnm_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x07\x09")
    assert read_pnm(tmp_path / "c.pgm", as_float=False).tolist() == [[7, 9]]
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 1\n255\n7 9")
    with pytest.raises(ImageFormatError):
        read_pnm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n2 2\n255\n\x01")
    with pytest.raises(ImageFormatError):
        read_pnm(tmp_path / "short.pgm")
    with pytest.raises(ImageFormatError):
        write_pnm(tmp_path / "x.pgm", np.full((2, 2), 300))


def test_overlay(tmp_path, rng):
    frame = rng.random((8, 8, 3))
    mask = np.zeros((8, 8), int)
    mask[2:4, 2:4] = 1
    write_overlay(tmp_path / "o.ppm", frame, mask, heat=rng.random((4, 4)))
    assert read_pnm(tmp_path / "o.ppm").shape == (8, 8, 3)


def _ckpt(rng, moments=True):
    tensors = {"enc1.0.w": rng.standard_normal((2, 3, 3, 3)), "enc1.0.b": np.zeros(2), "head.out.w": rng.standard_normal((2, 2, 1, 1))}
    mom = {k: (rng.standard_normal(v.shape), rng.random(v.shape)) for k, v in tensors.items()} if moments else None
    opt = {"t": 12, "lr": 0.003, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    return Checkpoint({"task": "binary", "prior_mode": "flow"}, tensors, step=12, optimizer=opt, moments=mom)


@pytest.mark.parametrize("moments", [True, False])
def test_checkpoint_round_trip(tmp_path, rng, moments):
    ck = _ckpt(rng, moments)
    save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == ck.config and back.step == 12 and back.optimizer == ck.optimizer
    assert all(np.array_equal(back.tensors[k], ck.tensors[k]) for k in ck.tensors)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption_detected(rng):
    raw = checkpoint_bytes(_ckpt(rng))
    for pos in rng.choice(len(raw), 40, replace=False):
        bad = bytearray(raw)
        bad[pos] ^= 0x5A
        with pytest.raises(CheckpointError):
            parse_checkpoint(bytes(bad))
    with pytest.raises(CheckpointError):
        parse_checkpoint(raw[:20])
