import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cauchy_1d, central_diff, gaussian_map_oracle, rel_err
from tkn.attention import (
    EDGE_THRESHOLD,
    AttentionParams,
    axis_interval,
    build_map,
    clip_params,
    compute_roi,
    eval_window,
    grad_params,
    kernel_roi,
    sample_points,
    sample_vector,
    scale_floor,
)

FAMILIES = ["gaussian", "cauchy"]


def params(mx, my, sx, sy, family="gaussian"):
    f = lambda v: np.atleast_1d(np.asarray(v, dtype=np.float64))
    return AttentionParams(f(mx), f(my), f(sx), f(sy), family)


@pytest.mark.parametrize("family", FAMILIES)
def test_window_peak_is_one(family):
    assert eval_window(family, 0.0) == 1.0


def test_window_closed_forms():
    assert eval_window("gaussian", 1.0) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert eval_window("cauchy", 1.0) == pytest.approx(0.5, abs=1e-15)
    # heavier tail at two scales out
    assert eval_window("cauchy", 2.0) == pytest.approx(0.2)
    assert eval_window("cauchy", 2.0) > eval_window("gaussian", 2.0)


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        eval_window("laplace", 0.0)
    with pytest.raises(ValueError):
        AttentionParams.initial(2, "laplace")


@settings(max_examples=200)
@given(st.sampled_from(FAMILIES), st.floats(0, 50), st.floats(1e-3, 10))
def test_window_symmetric_and_decreasing(family, u, du):
    assert eval_window(family, u) == eval_window(family, -u)
    assert eval_window(family, u + du) <= eval_window(family, u)
    assert 0.0 <= eval_window(family, u) <= 1.0


def test_sample_vector_example():
    np.testing.assert_allclose(sample_vector("gaussian", 0.5, 1.0, 5)[:3],
                               [0.88250, 0.96923, 1.0], atol=5e-6)


def test_sample_points_edge_cases():
    assert sample_points(1).tolist() == [0.5]
    assert sample_points(3).tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        sample_points(0)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("length", [1, 2, 7, 28])
def test_centered_vector_is_palindromic(family, length):
    v = sample_vector(family, 0.5, 0.3, length)
    np.testing.assert_allclose(v, v[::-1], atol=1e-15)


def test_map_axes_follow_rows_and_columns():
    # a window pushed to the right must peak in the last column, not the last row
    amap = build_map(params(1.0, 0.5, 0.2, 0.2), 5, 9)
    assert amap.F.shape == (1, 5, 9)
    assert amap.f_x.shape == (1, 9) and amap.f_y.shape == (1, 5)
    i, j = np.unravel_index(np.argmax(amap.F[0]), (5, 9))
    assert (i, j) == (2, 8)


def test_small_map_center_peak():
    amap = build_map(params(0.5, 0.5, 1.0, 1.0), 3, 3)
    assert amap.F[0, 1, 1] == 1.0
    assert amap.F[0].max() == 1.0


def test_gaussian_map_matches_bivariate_oracle_8x8():
    p = params(0.3, 0.7, 0.25, 0.6)
    np.testing.assert_allclose(build_map(p, 8, 8).F[0], gaussian_map_oracle(0.3, 0.7, 0.25, 0.6, 8, 8),
                               rtol=0, atol=1e-12)


def test_cauchy_map_is_product_of_1d_windows(rng):
    for _ in range(50):
        mx, my = rng.random(2)
        sx, sy = rng.uniform(0.05, 2, 2)
        h, w = rng.integers(1, 20, 2)
        F = build_map(params(mx, my, sx, sy, "cauchy"), h, w).F[0]
        ys = np.array([i / (h - 1) if h > 1 else 0.5 for i in range(h)])
        xs = np.array([j / (w - 1) if w > 1 else 0.5 for j in range(w)])
        ref = np.array([[cauchy_1d(x, mx, sx) * cauchy_1d(y, my, sy) for x in xs] for y in ys])
        np.testing.assert_allclose(F, ref, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(FAMILIES), st.floats(0, 1), st.floats(0, 1),
       st.floats(0.05, 3), st.floats(0.05, 3), st.integers(1, 30), st.integers(1, 30))
def test_map_invariants(family, mx, my, sx, sy, h, w):
    amap = build_map(params(mx, my, sx, sy, family), h, w)
    F = amap.F[0]
    assert np.all((F > 0) & (F <= 1))
    np.testing.assert_array_equal(F, np.outer(amap.f_y[0], amap.f_x[0]))
    assert np.linalg.matrix_rank(F, tol=1e-9 * F.max()) == 1


def test_map_float32_stays_float32():
    amap = build_map(AttentionParams.initial(3), 7, 7)
    assert amap.F.dtype == np.float32


# rois

@pytest.mark.parametrize("h,w,k", [(28, 28, 5), (14, 14, 5), (7, 7, 5), (56, 56, 5),
                                   (5, 5, 5), (1, 1, 1), (9, 31, 3), (32, 16, 1)])
def test_initial_params_give_full_roi(h, w, k):
    for roi in compute_roi(AttentionParams.initial(4), h, w, k):
        assert roi.is_full(h, w)


def test_roi_example_width_32():
    # +-0.2/sqrt(2) around the centre of 32 columns: [11.47, 20.53] -> [11, 21)
    assert axis_interval(0.5, 0.2, 32, 3) == (11, 21)


def test_roi_never_thinner_than_kernel():
    assert axis_interval(0.0, scale_floor(28, 5), 28, 5) == (0, 5)
    assert axis_interval(1.0, scale_floor(28, 5), 28, 5) == (23, 28)
    assert axis_interval(0.5, 0.01, 28, 5)[1] - axis_interval(0.5, 0.01, 28, 5)[0] == 5


def test_roi_snaps_float_noise_at_integer_bounds():
    # (0.5 - 0.25) * 28 is exactly 7 in reals; noise must not add a column
    s = 0.25 * math.sqrt(2.0)
    assert axis_interval(0.5, s, 28, 3) == (7, 21)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 2), st.floats(0.01, 2),
       st.integers(1, 40), st.integers(1, 40), st.sampled_from([1, 3, 5]))
def test_roi_contained_and_at_least_kernel(mx, my, sx, sy, h, w, k):
    if k > min(h, w):
        return
    roi = kernel_roi(mx, my, sx, sy, h, w, k)
    roi.validate(h, w, k)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0.05, 2), st.floats(0.5, 1), st.integers(5, 60))
def test_roi_shrinks_with_scale(m, s, factor, extent):
    a0, a1 = axis_interval(m, s, extent, 5)
    b0, b1 = axis_interval(m, s * factor, extent, 5)
    assert b1 - b0 <= a1 - a0


def test_random_rois_contained(rng):
    for _ in range(10_000):
        h, w = rng.integers(5, 60, 2)
        mx, my = rng.random(2)
        sx, sy = rng.uniform(0.001, 2, 2)
        kernel_roi(mx, my, sx, sy, h, w, 5).validate(h, w, 5)


@pytest.mark.parametrize("family", FAMILIES)
def test_roi_encloses_values_above_threshold(family, rng):
    for _ in range(500):
        n = int(rng.integers(5, 80))
        m, s = rng.random(), rng.uniform(0.02, 1.5)
        v = sample_vector(family, m, s, n)
        a, b = axis_interval(m, s, n, 1)
        above = np.flatnonzero(v >= EDGE_THRESHOLD[family])
        if above.size:
            assert a <= above.min() and above.max() < b
    assert eval_window(family, 1 / math.sqrt(2)) == pytest.approx(EDGE_THRESHOLD[family], abs=1e-15)


def test_threshold_constants():
    assert EDGE_THRESHOLD["gaussian"] == pytest.approx(0.778801, abs=1e-6)
    assert EDGE_THRESHOLD["cauchy"] == pytest.approx(2 / 3, abs=1e-15)


# clipping

def test_clip_examples():
    c = clip_params(params(-0.2, 1.3, 0.01, 2.0), 28, 28, 3)
    assert c.m_x[0] == 0.0 and c.m_y[0] == 1.0
    assert c.s_x[0] == pytest.approx(0.075761, abs=1e-6)
    assert c.s_y[0] == 2.0
    assert scale_floor(28, 3) == pytest.approx(3 / (math.sqrt(2) * 28))


def test_clip_uses_matching_extent():
    c = clip_params(params(0.5, 0.5, 0.0, 0.0), 10, 40, 5)
    assert c.s_x[0] == pytest.approx(scale_floor(40, 5))
    assert c.s_y[0] == pytest.approx(scale_floor(10, 5))


@settings(max_examples=200)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_clip_idempotent(mx, my, sx, sy):
    once = clip_params(params(mx, my, sx, sy), 14, 20, 5)
    twice = clip_params(once, 14, 20, 5)
    for name in ("m_x", "m_y", "s_x", "s_y"):
        assert getattr(once, name)[0] == getattr(twice, name)[0]
    assert 0 <= once.m_x[0] <= 1 and once.s_y[0] >= scale_floor(14, 5)


# gradients of sum(G * A * F) with respect to the window parameters

def _loss(G, A, p, h, w):
    return float(np.sum(G * A * build_map(p, h, w).F))


def test_grad_zero_upstream():
    p = params([0.3, 0.6], [0.5, 0.1], [0.4, 0.9], [0.2, 0.5], "cauchy")
    g = grad_params(np.zeros((2, 6, 6)), np.ones((2, 6, 6)), p, 6, 6)
    for v in g.values():
        assert not v.any()


@pytest.mark.parametrize("family", FAMILIES)
def test_grad_mean_zero_at_symmetric_peak(family):
    p = params(0.5, 0.5, 0.3, 0.3, family)
    g = grad_params(np.ones((1, 9, 9)), np.ones((1, 9, 9)), p, 9, 9)
    assert abs(g["m_x"][0]) < 1e-12 and abs(g["m_y"][0]) < 1e-12
    # spreading the window raises every value, so the scale gradient is positive
    assert g["s_x"][0] > 0 and g["s_y"][0] > 0


@pytest.mark.parametrize("family", FAMILIES)
def test_grad_finite_differences(family, rng):
    worst = 0.0
    for _ in range(100):
        c, h, w = 2, int(rng.integers(2, 9)), int(rng.integers(2, 9))
        p = params(rng.random(c), rng.random(c), rng.uniform(0.1, 1.5, c),
                   rng.uniform(0.1, 1.5, c), family)
        G = rng.standard_normal((3, c, h, w))
        A = rng.standard_normal((3, c, h, w))
        g = grad_params(G, A, p, h, w)
        for name, arr in p.arrays().items():
            for ci in range(c):
                num = central_diff(lambda: _loss(G, A, p, h, w), arr, ci)
                worst = max(worst, float(rel_err(g[name][ci], num)))
    assert worst <= 1e-4, worst
