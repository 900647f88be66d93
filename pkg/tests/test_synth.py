from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from mftap import synth
from mftap.errors import SpecValidationError
from mftap.flow import FlowField, apply_flow
from mftap.synth import InstrumentSpec, SceneSpec


def still_scene(**kw):
    inst = InstrumentSpec(type_id=2, center=(30.0, 34.0), angle=20.0)
    return SceneSpec(frames=6, seed=3, instruments=(inst,), **kw)


def perimeter(mask):
    """Foreground pixels with a 4-neighbour outside the mask."""
    m = mask.astype(bool)
    return int(m.sum() - ndimage.binary_erosion(m, border_value=0).sum())


def test_zero_motion():
    seq = synth.generate(still_scene())
    assert all(np.array_equal(f.vectors, np.zeros((64, 64, 2))) for f in seq.flows)
    for task in ("binary", "part", "type"):
        assert all(np.array_equal(m, seq.masks[task][0]) for m in seq.masks[task])
    assert seq.masks["binary"][0].sum() > 100


def test_pure_translation():
    inst = InstrumentSpec(type_id=1, center=(24.0, 24.0), angle=10.0, shaft_length=16.0, velocity=(2.0, 1.0))
    seq = synth.generate(SceneSpec(frames=6, seed=1, instruments=(inst,)))
    for t in range(1, 6):
        prev, cur = seq.masks["part"][t - 1], seq.masks["part"][t]
        expected = np.zeros_like(prev)
        expected[1:, 2:] = prev[:-1, :-2]
        assert np.array_equal(cur, expected)
        on = seq.masks["binary"][t - 1] > 0
        assert np.allclose(seq.flows[t - 1].vectors[on], [2.0, 1.0], atol=1e-9)


def test_determinism():
    spec = synth.random_scene(17, frames=5)
    a, b = synth.generate(spec), synth.generate(spec)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert all(a.masks[k].tobytes() == b.masks[k].tobytes() for k in a.masks)
    assert all(x.vectors.tobytes() == y.vectors.tobytes() for x, y in zip(a.flows, b.flows))
    assert synth.random_scene(17) == synth.random_scene(17)


def test_mask_invariants():
    seq = synth.generate(synth.random_scene(4, frames=8))
    assert seq.frames.shape == (8, 64, 64, 3) and len(seq.flows) == 7
    assert seq.frames.min() >= 0 and seq.frames.max() <= 1
    for task, c in synth.TASK_CLASSES.items():
        assert seq.masks[task].max() < c
        assert np.array_equal(seq.masks[task] > 0, seq.masks["binary"] > 0)
    m = seq.masks["binary"]
    assert not m[:, :2].any() and not m[:, -2:].any() and not m[:, :, :2].any() and not m[:, :, -2:].any()


def test_edge_case_suite():
    specs = {s.name: s for s in synth.edge_case_suite(frames=10)}
    assert set(specs) == {"no_instrument", "still_instrument", "camera_pan"}

    empty = synth.generate(specs["no_instrument"])
    assert not empty.masks["binary"].any()

    still = synth.generate(specs["still_instrument"])
    for t, f in enumerate(still.flows):
        on = still.masks["binary"][t] > 0
        assert on.any() and np.all(f.vectors[on] == 0)

    pan = synth.generate(specs["camera_pan"])
    for f in pan.flows:
        v = f.vectors.reshape(-1, 2)
        assert np.allclose(v, v[0], atol=1e-9)
        assert np.isclose(np.hypot(*v[0]), 3.0) and abs(v[0][1]) < 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_mask_flow_compatibility(seed):
    seq = synth.generate(synth.random_scene(seed, frames=10))
    for t in range(1, len(seq)):
        prev, cur = seq.masks["binary"][t - 1], seq.masks["binary"][t]
        warped = apply_flow(prev.astype(float), seq.flows[t - 1]) > 0
        assert np.count_nonzero(warped != (cur > 0)) <= 2 * perimeter(cur)


def test_validation_errors():
    base = still_scene()
    with pytest.raises(SpecValidationError):
        synth.generate(replace(base, frames=20, instruments=(replace(base.instruments[0], velocity=(3.0, 0.0)),)))
    with pytest.raises(SpecValidationError):
        synth.validate(replace(base, instruments=(replace(base.instruments[0], velocity=(4.5, 0.0), center=(5, 32)),)))
    with pytest.raises(SpecValidationError):
        synth.validate(replace(base, background_drift=(1.0, 1.0)))
    with pytest.raises(SpecValidationError):
        synth.validate(replace(base, instruments=base.instruments * 3))
    with pytest.raises(SpecValidationError):
        synth.validate(replace(base, instruments=(replace(base.instruments[0], type_id=7),)))


def test_flow_field_shapes():
    f = FlowField.uniform(4, 5, 1.0, -2.0)
    assert f.shape == (4, 5) and f.height == 4 and f.width == 5
    assert np.all(f.vectors[..., 1] == -2.0)
