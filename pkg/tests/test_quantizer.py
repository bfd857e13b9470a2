import numpy as np
import pytest

from taqkit.quantizer import (Granularity, QuantParams, SCALE_EPS,
                              calibrate_params, dequantize, fake_quantize,
                              quantize, round_half_away)


@pytest.mark.parametrize("x,expected", [
    (2.5, 3.0), (-2.5, -3.0), (2.4, 2.0), (-2.4, -2.0),
    (0.5, 1.0), (-0.5, -1.0), (0.0, 0.0), (3.0, 3.0),
])
def test_round_half_away(x, expected):
    assert round_half_away(np.array([x]))[0] == expected


def test_calibrate_two_bit_example():
    p = calibrate_params(np.array([0.0, 3.0]), 2, Granularity.TENSOR)
    assert p.scale[0] == 1.0
    assert p.zero_point[0] == 0


def test_calibrate_symmetric_eight_bit_example():
    p = calibrate_params(np.array([-1.0, 1.0]), 8, Granularity.TENSOR)
    assert p.scale[0] == pytest.approx(2.0 / 255.0, abs=0)
    assert p.zero_point[0] == 128  # round(255/2) away from zero


def test_calibrate_constant_tensor_degenerate():
    p = calibrate_params(np.array([5.0, 5.0, 5.0]), 8, Granularity.TENSOR)
    assert p.scale[0] == SCALE_EPS
    assert p.zero_point[0] == 0


def test_calibrate_rejects_empty_and_low_bits():
    with pytest.raises(ValueError):
        calibrate_params(np.array([]), 8, Granularity.TENSOR)
    with pytest.raises(ValueError):
        calibrate_params(np.array([1.0]), 1, Granularity.TENSOR)


def test_calibrate_group_counts_per_granularity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 7))
    assert calibrate_params(x, 8, Granularity.TENSOR).group_count == 1
    assert calibrate_params(x, 8, Granularity.TOKEN).group_count == 5
    assert calibrate_params(x, 8, Granularity.WEIGHT_CHANNEL).group_count == 7
    assert calibrate_params(x, 8, Granularity.INPUT_CHANNEL).group_count == 7


def test_quantize_grid_example():
    p = QuantParams(np.array([1.0]), np.array([0]), 2, Granularity.TENSOR)
    q = quantize(np.array([0.0, 1.0, 2.0, 3.0]), p)
    assert np.array_equal(q.codes, [0, 1, 2, 3])


@pytest.mark.parametrize("value,code", [(-100.0, 0), (300.0, 255)])
def test_quantize_clips(value, code):
    p = QuantParams(np.array([1.0]), np.array([0]), 8, Granularity.TENSOR)
    assert quantize(np.array([value]), p).codes[0] == code


def test_dequantize_identity_grid():
    p = QuantParams(np.array([1.0]), np.array([0]), 2, Granularity.TENSOR)
    q = quantize(np.array([0.0, 1.0, 2.0, 3.0]), p)
    assert np.array_equal(dequantize(q), [0.0, 1.0, 2.0, 3.0])


def test_dequantize_zero_point_maps_to_zero():
    p = QuantParams(np.array([2.0 / 255.0]), np.array([128]), 8, Granularity.TENSOR)
    q = quantize(np.array([0.0]), p)
    assert q.codes[0] == 128
    assert dequantize(q)[0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_bound_random_tensors(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-4.0, 9.0, size=(32, 16))
    p = calibrate_params(x, 8, Granularity.TENSOR)
    err = np.abs(fake_quantize(x, p) - x)
    assert err.max() <= p.scale[0] / 2 + 1e-12


def test_fake_quantize_is_the_two_step_composition():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((10, 10))
    p = calibrate_params(x, 4, Granularity.TOKEN)
    two_step = dequantize(quantize(x, p))
    assert np.array_equal(fake_quantize(x, p), two_step)


def test_fake_quantize_fixes_grid_points():
    p = QuantParams(np.array([0.25]), np.array([7]), 4, Granularity.TENSOR)
    codes = np.arange(16)
    grid = 0.25 * (codes - 7.0)
    assert np.array_equal(fake_quantize(grid, p), grid)


def test_fake_quant_mse_matches_elementwise_oracle():
    # Oracle recomputes clip(round(x/S)+Z) per element with python floats.
    rng = np.random.default_rng(5)
    x = rng.standard_normal(256)
    p = calibrate_params(x, 8, Granularity.TENSOR)
    s, z = float(p.scale[0]), int(p.zero_point[0])

    def oracle_fq(val):
        r = np.floor(abs(val / s) + 0.5) * (1 if val >= 0 else -1)
        code = min(max(r + z, 0), 255)
        return s * (code - z)

    expected = np.mean([(oracle_fq(v) - v) ** 2 for v in x])
    got = np.mean((fake_quantize(x, p) - x) ** 2)
    assert abs(got - expected) <= 1e-12


def test_quantize_monotone_within_group():
    rng = np.random.default_rng(9)
    x = np.sort(rng.uniform(-20, 20, size=500))
    p = calibrate_params(x, 6, Granularity.TENSOR)
    codes = quantize(x, p).codes
    assert np.all(np.diff(codes) >= 0)


def test_granularity_refinement_two_token_example():
    x = np.vstack([np.linspace(0.0, 1.0, 64), np.linspace(0.0, 100.0, 64)])
    per_tensor = calibrate_params(x, 8, Granularity.TENSOR)
    per_token = calibrate_params(x, 8, Granularity.TOKEN)
    mse_tensor = np.mean((fake_quantize(x, per_tensor) - x) ** 2)
    mse_token = np.mean((fake_quantize(x, per_token) - x) ** 2)
    assert mse_token <= mse_tensor


@pytest.mark.parametrize("gran", [Granularity.TENSOR, Granularity.TOKEN,
                                  Granularity.WEIGHT_CHANNEL])
def test_codes_stay_in_range_for_extreme_inputs(gran):
    rng = np.random.default_rng(13)
    x = rng.standard_normal((8, 8)) * 10.0**rng.integers(-6, 6, size=(8, 8))
    p = calibrate_params(x, 3, gran)
    codes = quantize(x * 1e3, p).codes   # deliberately far out of range
    assert codes.min() >= 0 and codes.max() <= 7


def test_quantize_group_mismatch_raises():
    p = calibrate_params(np.random.default_rng(1).standard_normal((4, 6)),
                         8, Granularity.TOKEN)
    with pytest.raises(ValueError):
        quantize(np.zeros((5, 6)), p)


def test_params_validation():
    with pytest.raises(ValueError):
        QuantParams(np.array([0.0]), np.array([0]), 8, Granularity.TENSOR)
    with pytest.raises(ValueError):
        QuantParams(np.array([1.0]), np.array([256]), 8, Granularity.TENSOR)
    with pytest.raises(ValueError):
        QuantParams(np.array([1.0]), np.array([0]), 1, Granularity.TENSOR)
