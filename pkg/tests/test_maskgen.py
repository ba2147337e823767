import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from unipaint.maskgen import (
    KIND_ORDER,
    MaskKind,
    MixedMaskPolicy,
    coverage,
    is_frame_granular,
    make_interpolation_mask,
    make_marginal_mask,
    make_object_mask,
    make_random_mask,
    masked_frame_count,
    resize_mask,
    sample_mixed,
)
from unipaint.numerics import RandomStream


def _binary(m):
    return bool(np.all((m == 0) | (m == 1)))


# --- object ------------------------------------------------------------------

def test_object_radius_zero_identity():
    seg = (np.random.default_rng(0).random((3, 1, 8, 8)) > 0.7).astype(np.float32)
    np.testing.assert_array_equal(make_object_mask(seg, 0), seg)


def test_object_single_pixel_cross():
    seg = np.zeros((1, 1, 7, 7), dtype=np.float32)
    seg[0, 0, 3, 3] = 1
    out = make_object_mask(seg, 1)
    assert out.sum() == 5
    expected = {(3, 3), (2, 3), (4, 3), (3, 2), (3, 4)}
    assert {tuple(p) for p in np.argwhere(out[0, 0])} == expected


def test_object_dilation_stays_per_frame():
    seg = np.zeros((3, 1, 5, 5), dtype=np.float32)
    seg[1, 0, 2, 2] = 1
    out = make_object_mask(seg, 2)
    assert out[0].sum() == 0 and out[2].sum() == 0
    assert out[1].sum() == 13  # L1 ball of radius 2


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.integers(0, 3))
def test_object_extensive(seed, radius):
    seg = (np.random.default_rng(seed).random((2, 1, 6, 6)) > 0.8).astype(np.float32)
    out = make_object_mask(seg, radius)
    assert np.all(out[seg == 1] == 1)
    assert _binary(out)


def test_object_rejects_negative_radius():
    with pytest.raises(ValueError):
        make_object_mask(np.zeros((1, 1, 4, 4)), -1)


# --- random ------------------------------------------------------------------

def test_random_coverage_zero_and_one():
    s = RandomStream(0)
    assert make_random_mask(4, 8, 8, (0, 0), s).sum() == 0
    assert make_random_mask(4, 8, 8, (1, 1), s).all()


def test_random_coverage_postcondition_1000_seeds():
    root = RandomStream(123)
    covs = []
    for i in range(1000):
        m = make_random_mask(8, 32, 32, (0.2, 0.4), root.spawn(i))
        assert _binary(m)
        covs.append(coverage(m))
    covs = np.array(covs)
    assert covs.min() >= 0.2 and covs.max() <= 0.4


def test_random_mask_rectangles_drift_smoothly():
    m = make_random_mask(8, 32, 32, (0.1, 0.3), RandomStream(5))
    # consecutive frames overlap substantially under linear drift
    for f in range(7):
        inter = (m[f] * m[f + 1]).sum()
        assert inter > 0


def test_random_infeasible_rejected():
    with pytest.raises(ValueError):
        make_random_mask(1, 8, 8, (0.50001, 0.50002), RandomStream(0), max_tries=3)
    with pytest.raises(ValueError):
        make_random_mask(1, 8, 8, (0.6, 0.5), RandomStream(0))


# --- marginal ----------------------------------------------------------------

def test_marginal_border_zero():
    assert make_marginal_mask(3, 8, 8, 0).sum() == 0


def test_marginal_count():
    m = make_marginal_mask(2, 8, 8, 2)
    assert (m[0].sum(), m[1].sum()) == (48, 48)


def test_marginal_temporally_constant_default():
    m = make_marginal_mask(5, 32, 32)
    assert all(np.array_equal(m[0], m[f]) for f in range(5))
    assert m[0, 0, 0, 0] == 1 and m[0, 0, 16, 16] == 0
    assert m[0, 0, 7, 16] == 1 and m[0, 0, 8, 16] == 0


def test_marginal_border_too_large():
    with pytest.raises(ValueError):
        make_marginal_mask(1, 8, 8, 4)


# --- interpolation -------------------------------------------------------------

def test_interpolation_two_keyframes():
    m = make_interpolation_mask(8, 4, 4, {0, 7})
    assert m[0].sum() == 0 and m[7].sum() == 0
    assert all(m[f].all() for f in range(1, 7))


def test_interpolation_all_keys():
    assert make_interpolation_mask(5, 4, 4, range(5)).sum() == 0


def test_interpolation_count_16():
    assert masked_frame_count(make_interpolation_mask(16, 4, 4, {0, 15})) == 14


def test_interpolation_rejects_empty_and_out_of_range():
    with pytest.raises(ValueError):
        make_interpolation_mask(8, 4, 4, [])
    with pytest.raises(ValueError):
        make_interpolation_mask(8, 4, 4, [8])


@given(st.sets(st.integers(0, 9), min_size=1))
def test_interpolation_frame_granular(keys):
    m = make_interpolation_mask(10, 3, 5, keys)
    assert is_frame_granular(m) and _binary(m)


# --- mixed sampler ---------------------------------------------------------------

def _context(F=4, H=8, W=8):
    seg = np.zeros((F, 1, H, W), dtype=np.float32)
    seg[:, :, 2:5, 2:5] = 1
    return {"frames": F, "height": H, "width": W, "object_mask": seg, "prompt": 3}


def draw_mixed(policy, n, seed):
    stream = RandomStream(seed)
    kinds, nulls = [], 0
    ctx = _context()
    for _ in range(n):
        mask, prompt, kind = sample_mixed(policy, ctx, stream)
        assert _binary(mask)
        kinds.append(KIND_ORDER.index(kind))
        nulls += prompt is None
    return np.bincount(kinds, minlength=4), nulls


def test_mixed_frequencies_and_null_rate():
    counts, nulls = draw_mixed(MixedMaskPolicy(), 10 ** 4, seed=2024)
    freq = counts / 10 ** 4
    np.testing.assert_allclose(freq, [0.4, 0.1, 0.2, 0.3], atol=0.02)
    assert abs(nulls / 10 ** 4 - 0.1) <= 0.01
    chi2 = stats.chisquare(counts, 10 ** 4 * np.array([0.4, 0.1, 0.2, 0.3]))
    assert chi2.pvalue > 0.01


def test_mixed_degenerate_policy():
    counts, _ = draw_mixed(MixedMaskPolicy((1, 0, 0, 0)), 200, seed=1)
    assert counts[0] == 200


def test_mixed_object_mask_uses_ground_truth():
    ctx = _context()
    mask, _, kind = sample_mixed(MixedMaskPolicy((1, 0, 0, 0), object_dilation=0), ctx, RandomStream(0))
    assert kind is MaskKind.OBJECT
    np.testing.assert_array_equal(mask, ctx["object_mask"])


def test_policy_validation():
    with pytest.raises(ValueError):
        MixedMaskPolicy((0.5, 0.5, 0.1, 0.0))
    with pytest.raises(ValueError):
        MixedMaskPolicy(null_prompt_prob=1.5)
    assert sum(MixedMaskPolicy.spatial_only().probabilities) == pytest.approx(1.0, abs=1e-12)


# --- resize ------------------------------------------------------------------------

def test_resize_constant():
    np.testing.assert_allclose(resize_mask(np.ones((2, 1, 32, 32)), 16, 16), 1.0)
    np.testing.assert_allclose(resize_mask(np.ones((2, 1, 8, 8)), 5, 11), 1.0, atol=1e-6)


def test_resize_identity():
    m = (np.random.default_rng(0).random((2, 1, 6, 6)) > 0.5).astype(np.float32)
    np.testing.assert_array_equal(resize_mask(m, 6, 6), m)


def test_resize_checkerboard_mean():
    cb = (np.indices((4, 4)).sum(0) % 2).astype(np.float32)[None, None]
    out = resize_mask(cb, 2, 2)
    assert out.min() >= 0 and out.max() <= 1
    assert abs(out.mean() - cb.mean()) <= 0.05


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.integers(1, 12), st.integers(1, 12))
def test_resize_clamped(seed, h, w):
    m = (np.random.default_rng(seed).random((2, 1, 8, 8)) > 0.5).astype(np.float32)
    out = resize_mask(m, h, w)
    assert out.shape == (2, 1, h, w)
    assert out.min() >= 0 and out.max() <= 1
