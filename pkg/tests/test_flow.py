import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mftap import autodiff as ad
from mftap.autodiff import Tensor
from mftap.errors import ShapeError
from mftap.flow import (
    FlowConfig,
    FlowField,
    apply_flow,
    collapse_foreground,
    dilate,
    endpoint_error,
    estimate_flow,
    reverse_flow,
    time_turner,
    warp_tensor,
)
from oracles import numerical_grad, rel_error, scatter_max, sliding_max


def shift(m, dx, dy):
    """Exact translation by integers, zero fill."""
    h, w = m.shape
    out = np.zeros_like(m)
    ys, xs = slice(max(dy, 0), h + min(dy, 0)), slice(max(dx, 0), w + min(dx, 0))
    yd, xd = slice(max(-dy, 0), h + min(-dy, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = m[yd, xd]
    return out


def textured(rng, size=64, sigma=1.5):
    img = ndimage.gaussian_filter(rng.random((size, size)), sigma, mode="wrap")
    return (img - img.min()) / (img.max() - img.min())


# -- apply_flow ----------------------------------------------------------------


def test_zero_flow_identity(rng):
    m = rng.random((9, 7))
    assert np.array_equal(apply_flow(m, FlowField.zeros(9, 7)), m)


def test_single_pixel_translation():
    m = np.zeros((10, 10))
    m[4, 4] = 1.0
    out = apply_flow(m, FlowField.uniform(10, 10, 1, 0))
    expected = np.zeros((10, 10))
    expected[4, 5] = 1.0
    assert np.array_equal(out, expected)


@pytest.mark.parametrize("seed", range(5))
def test_scatter_matches_loop_oracle(seed):
    r = np.random.default_rng(seed)
    m = r.random((12, 11)) * (r.random((12, 11)) < 0.3)
    flow = FlowField(r.integers(-3, 4, size=(12, 11, 2)).astype(float))
    assert np.array_equal(apply_flow(m, flow), scatter_max(m, flow.vectors))
    # fractional displacements round half up
    frac = FlowField(r.uniform(-3, 3, size=(12, 11, 2)))
    assert np.array_equal(apply_flow(m, frac), scatter_max(m, frac.vectors))


def test_collision_keeps_max():
    m = np.array([[0.2, 0.9, 0.4]])
    flow = np.zeros((1, 3, 2))
    flow[0, 0, 0], flow[0, 2, 0] = 1, -1  # all three land on the middle pixel
    assert apply_flow(m, FlowField(flow)).tolist() == [[0.0, 0.9, 0.0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(-4, 4), st.integers(-4, 4), st.integers(0, 10_000))
def test_translation_equivariance_and_recovery(dx, dy, seed):
    r = np.random.default_rng(seed)
    m = r.random((16, 16))
    fwd = apply_flow(m, FlowField.uniform(16, 16, dx, dy))
    assert np.array_equal(fwd, shift(m, dx, dy))
    back = apply_flow(fwd, reverse_flow(FlowField.uniform(16, 16, dx, dy)))
    stayed = shift(shift(np.ones_like(m), dx, dy), -dx, -dy) > 0
    assert np.array_equal(back[stayed], m[stayed])


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.integers(0, 10_000))
def test_positive_homogeneity(c, seed):
    r = np.random.default_rng(seed)
    m = r.random((8, 8))
    flow = FlowField(r.integers(-2, 3, size=(8, 8, 2)).astype(float))
    np.testing.assert_array_equal(apply_flow(c * m, flow), c * apply_flow(m, flow))


def test_apply_flow_dimension_mismatch():
    with pytest.raises(ShapeError):
        apply_flow(np.zeros((4, 5)), FlowField.zeros(4, 4))


def test_warp_tensor_grad_routes_to_winner(rng):
    x = Tensor(rng.random((1, 3, 6, 6)), requires_grad=True)
    flow = FlowField(rng.integers(-2, 3, size=(6, 6, 2)).astype(float))
    probe = rng.standard_normal((1, 3, 6, 6))

    def loss():
        w, _ = warp_tensor(x, flow)
        return ad.sum_all(ad.mul(w, Tensor(probe)))

    ad.backward(loss())
    for idx in range(x.data.size):
        num = numerical_grad(lambda: loss().item(), x.data.reshape(-1), idx)
        assert rel_error(x.grad.reshape(-1)[idx], num) <= 1e-4 or abs(num - x.grad.reshape(-1)[idx]) < 1e-9
    w, landed = warp_tensor(Tensor(x.data), flow)
    for c in range(3):
        assert np.array_equal(w.data[0, c], scatter_max(x.data[0, c], flow.vectors))
    assert np.array_equal(landed, scatter_max(np.ones((6, 6)), flow.vectors) > 0)


# -- collapse / dilate / reverse ---------------------------------------------------


def test_collapse_foreground(rng):
    bg = np.zeros((1, 3, 4, 4))
    bg[:, 0] = 1
    assert np.array_equal(collapse_foreground(bg), np.zeros((4, 4)))
    p = rng.random((1, 2, 5, 5))
    p /= p.sum(axis=1, keepdims=True)
    assert np.array_equal(collapse_foreground(p), p[0, 1])
    q = rng.random((1, 4, 5, 5))
    q /= q.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(collapse_foreground(q), q[0, 1] + q[0, 2] + q[0, 3], atol=1e-15)
    with pytest.raises(ShapeError):
        collapse_foreground(np.ones((1, 1, 4, 4)))


def test_dilate(rng):
    m = rng.random((7, 9))
    assert np.array_equal(dilate(m, 0), m)
    one = np.zeros((7, 7))
    one[3, 3] = 1
    d = dilate(one, 1)
    assert d.sum() == 9 and np.all(d[2:5, 2:5] == 1)
    for r in (1, 2, 3):
        assert np.array_equal(dilate(m, r), sliding_max(m, r))
    with pytest.raises(ValueError):
        dilate(m, -1)


def test_reverse_flow(rng):
    f = FlowField(rng.standard_normal((5, 6, 2)))
    assert np.array_equal(reverse_flow(reverse_flow(f)).vectors, f.vectors)
    assert np.array_equal(reverse_flow(FlowField.zeros(3, 3)).vectors, np.zeros((3, 3, 2)))
    r = reverse_flow(FlowField.uniform(4, 4, 2, -3))
    assert np.all(r.vectors[..., 0] == -2) and np.all(r.vectors[..., 1] == 3)


# -- time turner ---------------------------------------------------------------------


def test_time_turner_identity(rng):
    p = rng.random((1, 2, 8, 8))
    p /= p.sum(axis=1, keepdims=True)
    assert np.array_equal(time_turner(p, FlowField.zeros(8, 8), 0), p[0, 1])


def test_time_turner_shift_then_grow():
    probs = np.zeros((1, 2, 16, 16))
    probs[0, 0] = 1
    blob = [(5, 5), (5, 6), (6, 5), (6, 6), (7, 5)]
    for y, x in blob:
        probs[0, :, y, x] = [0, 1]
    prior = time_turner(probs, FlowField.uniform(16, 16, 3, 0), 1)
    expected = sliding_max(scatter_max(probs[0, 1], FlowField.uniform(16, 16, 3, 0).vectors), 1)
    assert np.array_equal(prior, expected)
    assert prior[5, 8] == 1 and prior[4, 7] == 1 and prior[5, 6] == 0


def test_time_turner_first_frame_zero():
    assert np.array_equal(time_turner(None, FlowField.zeros(6, 5), 2), np.zeros((6, 5)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 3), st.integers(0, 10_000))
def test_time_turner_range_and_support(radius, seed):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((1, 3, 10, 10)) * 3
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    flow = FlowField(r.uniform(-4, 4, size=(10, 10, 2)))
    prior = time_turner(p, flow, radius)
    assert prior.min() >= 0 and prior.max() <= 1
    reach = dilate(scatter_max(np.ones((10, 10)), flow.vectors), radius)
    assert np.all(prior[reach == 0] == 0)


# -- estimation ------------------------------------------------------------------------


def test_identical_frames_zero_flow(rng):
    img = textured(rng)
    f = estimate_flow(img, img)
    assert np.hypot(f.vectors[..., 0], f.vectors[..., 1]).mean() <= 0.05


def test_integer_shift_endpoint_error(rng):
    img = textured(rng)
    cur = np.roll(img, (3, 2), axis=(0, 1))  # dx=2, dy=3, wrapped
    f = estimate_flow(img, cur)
    interior = np.zeros(img.shape, dtype=bool)
    interior[8:-8, 8:-8] = True
    assert endpoint_error(f, FlowField.uniform(64, 64, 2, 3), interior) <= 0.5


def test_estimate_flow_translation_consistency(rng):
    img = textured(rng)
    cur = np.roll(img, (-1, 2), axis=(0, 1))
    fwd = estimate_flow(img, cur)
    bwd = estimate_flow(cur, img)
    d = np.hypot(*(fwd.vectors + bwd.vectors).transpose(2, 0, 1))[8:-8, 8:-8]
    assert d.mean() <= 1.0


def test_estimate_flow_errors(rng):
    with pytest.raises(ShapeError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((8, 8)), np.zeros((8, 8)), FlowConfig(smoothness=0))


def test_estimate_flow_is_pure(rng):
    a, b = textured(rng, 32), textured(rng, 32)
    assert estimate_flow(a, b).vectors.tobytes() == estimate_flow(a, b).vectors.tobytes()
