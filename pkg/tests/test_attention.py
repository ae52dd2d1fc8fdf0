from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from msme.attention import (MarkerAvailability, MEModule, SamplingPolicy, SEModule, excitation_vector,
                            me_forward, sample_markers, se_forward)
from msme.errors import ContractError, DimensionError
from msme.tensor import ParameterRegistry, Tensor


def _draw_masks(policy, K, n, seed, provided=None):
    rng = np.random.default_rng(seed)
    provided = provided or MarkerAvailability.full(K)
    x = np.ones((K, 1, 1), np.float32)
    return [sample_markers(x, policy, rng, "train", provided)[1].mask for _ in range(n)]


def test_uniform_over_all_nonempty_subsets():
    K, n = 5, 100_000
    counts = Counter(_draw_masks(SamplingPolicy("MS", 0.5), K, n, seed=0))
    assert 0 not in counts
    assert sorted(counts) == list(range(1, 32))
    freq = np.array([counts[m] for m in range(1, 32)]) / n
    assert np.all(np.abs(freq - 1 / 31) <= 0.1 / 31)
    assert sps.chisquare([counts[m] for m in range(1, 32)]).pvalue > 1e-3


def test_sampling_restricted_to_provided_markers():
    provided = MarkerAvailability.from_markers([1, 3], 3)
    masks = set(_draw_masks(SamplingPolicy("MS", 0.5), 3, 2000, seed=1, provided=provided))
    assert masks == {0b001, 0b100, 0b101}


def test_keep_probability_follows_r_drop():
    # with rejection of the empty draw, P(marker kept) = (1-r)/(1-r^K)
    r, K = 0.7, 3
    masks = np.array(_draw_masks(SamplingPolicy("MS", r), K, 40_000, seed=2))
    kept = np.mean((masks & 1) > 0)
    assert kept == pytest.approx((1 - r) / (1 - r ** K), abs=0.01)


def test_mz_and_inference_keep_everything():
    x = np.arange(12, dtype=np.float32).reshape(3, 2, 2) + 1
    rng = np.random.default_rng(0)
    out, used = sample_markers(x, SamplingPolicy("MZ"), rng, "train", MarkerAvailability.full(3))
    np.testing.assert_array_equal(out, x)
    out, used = sample_markers(x, SamplingPolicy("MS"), rng, "infer", MarkerAvailability.from_mask(0b011, 3))
    assert used.mask == 0b011
    np.testing.assert_array_equal(out[2], 0)
    np.testing.assert_array_equal(out[:2], x[:2])


def test_dropout_scaling_variants():
    x = np.ones((4, 2, 2), np.float32)
    rng = np.random.default_rng(3)
    out, used = sample_markers(x, SamplingPolicy("MS-DR", 0.25), rng, "train", MarkerAvailability.full(4))
    present = np.array(used.bits, bool)
    np.testing.assert_allclose(out[present], 1 / 0.75)
    np.testing.assert_array_equal(out[~present], 0)
    out, _ = sample_markers(x, SamplingPolicy("MS-DR", 0.25), rng, "infer", MarkerAvailability.full(4))
    np.testing.assert_array_equal(out, x)
    v = MarkerAvailability.from_mask(0b0101, 4)
    out, _ = sample_markers(x, SamplingPolicy("MS-VR", 0.5), rng, "infer", v)
    np.testing.assert_allclose(out[[0, 2]], 2.0)
    np.testing.assert_array_equal(out[[1, 3]], 0)


def test_empty_availability_rejected():
    with pytest.raises(ContractError):
        sample_markers(np.ones((2, 1, 1)), SamplingPolicy("MS"), np.random.default_rng(0), "infer",
                       MarkerAvailability((0, 0)))
    with pytest.raises(ContractError):
        SamplingPolicy("MS", 1.0)
    with pytest.raises(ContractError):
        SamplingPolicy("dropout")


def test_availability_round_trips():
    v = MarkerAvailability.from_markers([1, 3], 4)
    assert v.mask == 0b0101 and v.markers == (1, 3) and v.name == "m_13" and v.popcount == 2
    assert MarkerAvailability.from_mask(v.mask, 4) == v
    with pytest.raises(ContractError):
        MarkerAvailability.from_markers([5], 4)


@pytest.mark.parametrize("K,F", [(1, 4), (3, 8), (3, 16), (5, 7)])
def test_me_parameter_count(K, F):
    reg = ParameterRegistry()
    MEModule.create(reg, "m", K, F, np.random.default_rng(0))
    assert reg.count() == (2 ** K - 1) * (K + 1) + F * (2 ** K - 1) + F == MEModule.parameter_count(K, F)
    reg = ParameterRegistry()
    MEModule.create(reg, "m", K, F, np.random.default_rng(0), use_bias=False)
    assert reg.count() == MEModule.parameter_count(K, F, use_bias=False)


def test_se_shape_and_parameter_count():
    reg = ParameterRegistry()
    mod = SEModule.create(reg, "s", 10, np.random.default_rng(0))
    assert reg.count() == SEModule.parameter_count(10) == 2 * 10 * 5
    out = se_forward(Tensor(np.ones((10, 3, 3), np.float32)), mod)
    assert out.shape == (10, 3, 3)
    with pytest.raises(DimensionError):
        se_forward(Tensor(np.ones((4, 3, 3), np.float32)), mod)


def test_excitation_weights_are_gates():
    reg = ParameterRegistry(np.float64)
    mod = MEModule.create(reg, "m", 3, 6, np.random.default_rng(1))
    for mask in range(1, 8):
        w = excitation_vector(MarkerAvailability.from_mask(mask, 3), mod).data
        assert w.shape == (6,) and np.all((w > 0) & (w < 1))
    with pytest.raises(DimensionError):
        excitation_vector(MarkerAvailability.full(4), mod)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(1, 7), st.integers(0, 1000))
def test_me_is_positively_homogeneous_in_features(c, mask, seed):
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry(np.float64)
    mod = MEModule.create(reg, "m", 3, 4, rng)
    x = rng.standard_normal((4, 3, 3))
    v = MarkerAvailability.from_mask(mask, 3)
    a = me_forward(Tensor(c * x), v, mod).data
    b = c * me_forward(Tensor(x), v, mod).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
