import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixcomp.posit import InputDomainError, ScaleVariant, posit_table
from mixcomp.quantize import (
    DegenerateScaleError,
    FixPParams,
    PactParams,
    PositGrid,
    fixp_codes,
    fixp_dequantize,
    fixp_quantize_weights,
    fixp_scale,
    pact_forward,
    pact_quantize,
    posit_grad,
    posit_quantize_weights,
    posit_surrogate,
    round_half_away,
    ste_grad,
)

from oracles import oracle_fixp, oracle_posit

V = ScaleVariant


def test_fixp_example():
    Wq, scale = fixp_quantize_weights([0.5, -0.25, 0.25, -0.5])
    assert scale == 0.703125
    assert Wq.tolist() == [0.75, -0.25, 0.25, -0.75]


def test_fixp_constant_scale():
    assert fixp_scale(np.full(10, 0.5)) == 0.9375
    assert fixp_scale(np.full(10, -0.5)) == 0.9375


def test_fixp_degenerate_scale():
    with pytest.raises(DegenerateScaleError, match="unquantized"):
        fixp_quantize_weights(np.zeros(5))


def test_fixp_rejects_non_finite():
    with pytest.raises(InputDomainError):
        fixp_quantize_weights([1.0, np.nan])


def test_fixp_params_validation():
    p = FixPParams()
    assert (p.levels, p.step, p.zero_offset) == (15, 0.25, 8)
    with pytest.raises(ValueError):
        FixPParams(int_bits=3)


def test_fixp_codes_are_signed_grid_indices():
    rng = np.random.default_rng(0)
    W = rng.normal(0, 0.1, 500)
    Wq, s = fixp_quantize_weights(W)
    codes = fixp_codes(W, s)
    assert codes.min() >= -8 and codes.max() <= 7
    assert np.array_equal(codes * 0.25, Wq)


@pytest.mark.parametrize("seed", range(5))
def test_fixp_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_t(3, 200) * rng.uniform(0.01, 1.0)
    Wq, scale = fixp_quantize_weights(W)
    ref_q, ref_scale = oracle_fixp(W)
    assert math.isclose(scale, ref_scale, rel_tol=1e-12)
    assert Wq.tolist() == ref_q


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-100, 100)))
def test_fixp_codomain_and_idempotence(W):
    if np.mean(np.abs(W)) == 0:
        return
    Wq, s = fixp_quantize_weights(W)
    j = (Wq + 2.0) / 0.25
    assert np.array_equal(j, np.round(j)) and j.min() >= 0 and j.max() <= 15
    Wq2, _ = fixp_quantize_weights(s * Wq, scale=s)
    assert np.array_equal(Wq, Wq2)


def test_fixp_dequantize_is_scaled_grid():
    W = np.array([0.5, -0.25, 0.25, -0.5])
    assert np.allclose(fixp_dequantize(W), 0.703125 * np.array([0.75, -0.25, 0.25, -0.75]))


def test_round_half_away():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -2.5, 0.49]).tolist() == [1, 2, 3, -1, -3, 0]


def test_posit_weight_examples():
    assert posit_quantize_weights([0.3, -0.3]).tolist() == [0.25, -0.25]
    assert posit_quantize_weights([0.0, 20.0]).tolist() == [0.0, 16.0]


@pytest.mark.parametrize("variant", list(V))
def test_posit_weights_match_oracle(variant):
    rng = np.random.default_rng(3)
    W = np.concatenate([rng.normal(0, 0.3, 300), posit_table(variant)])
    assert posit_quantize_weights(W, variant).tolist() == oracle_posit(W, variant)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)), st.sampled_from(list(V)))
def test_posit_codomain_and_idempotence(W, variant):
    q = posit_quantize_weights(W, variant)
    assert np.all(np.isin(q, posit_table(variant)))
    assert np.array_equal(posit_quantize_weights(q, variant), q)


def _mean_abs_errors(sigma, seed, n=100_000):
    return _mean_abs_errors_of(np.random.default_rng(seed).normal(0.0, sigma, n))


def test_gaussian_error_ordering_frozen():
    # Frozen from the brute-force oracles above (seed 0, 1e5 samples). With a
    # mean|W|-adaptive scale the uniform grid beats both scaled posit grids
    # on Gaussian data.
    fixp, sc4, sc8 = _mean_abs_errors(0.05, 0)
    assert fixp == pytest.approx(0.0047384293, rel=1e-8)
    assert sc4 == pytest.approx(0.0104839964, rel=1e-8)
    assert sc8 == pytest.approx(0.0078594965, rel=1e-8)
    assert fixp < sc8 < sc4


def test_heavy_tailed_weights_favour_posit():
    x = 0.02 * np.random.default_rng(0).standard_t(1.5, 100_000)
    fixp, sc4, sc8 = _mean_abs_errors_of(x)
    assert fixp == pytest.approx(0.0159202304, rel=1e-8)
    assert sc8 == pytest.approx(0.0111740560, rel=1e-8)
    assert sc8 < sc4 < fixp


def _mean_abs_errors_of(x):
    return (
        float(np.mean(np.abs(fixp_dequantize(x) - x))),
        float(np.mean(np.abs(posit_quantize_weights(x, V.SC4) - x))),
        float(np.mean(np.abs(posit_quantize_weights(x, V.SC8) - x))),
    )


def test_pact_examples():
    p = PactParams(alpha=6.0)
    assert pact_forward(np.array([-1.0, 3.0, 9.0]), p).tolist() == [0.0, 3.0, 6.0]
    codes, xq = pact_quantize(np.array([3.0, 0.0, 6.0]), p)
    assert codes.tolist() == [8, 0, 15]
    assert xq[0] == pytest.approx(3.2) and xq[1] == 0.0 and xq[2] == 6.0


def test_pact_rejects_bad_alpha():
    with pytest.raises(ValueError):
        PactParams(alpha=0.0)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=50), st.floats(0.1, 15))
def test_pact_range_and_monotone(xs, alpha):
    p = PactParams(alpha=alpha)
    x = np.sort(np.array(xs))
    y = pact_forward(x, p)
    assert y.min() >= 0 and y.max() <= alpha
    codes, _ = pact_quantize(y, p)
    assert np.all(np.diff(codes) >= 0) and codes.max() <= 15


def test_ste_examples():
    assert ste_grad([0.0, 5.0, -2.0, 1.75, -2.01], -2, 1.75).tolist() == [1, 0, 1, 1, 0]


def test_posit_grad_examples():
    g = PositGrid.from_variant(V.UNIT)
    assert posit_grad(1.5, g) == pytest.approx(10.0)
    assert posit_grad(1.0, g) == pytest.approx(10.0 / math.cosh(2.5) ** 2)
    assert posit_grad(1.0, g) == pytest.approx(0.266, abs=5e-4)
    assert posit_grad(30.0, g) == 0.0
    assert posit_grad(-30.0, g) == 0.0


@pytest.mark.parametrize("variant", list(V))
def test_posit_grad_matches_surrogate_derivative(variant):
    g = PositGrid.from_variant(variant)
    a = g.alphas
    rng = np.random.default_rng(7)
    i = rng.integers(0, len(a) - 1, 1000)
    d = a[i + 1] - a[i]
    x = a[i] + d * rng.uniform(0.05, 0.95, 1000)
    h = 1e-6 * d
    fd = (posit_surrogate(x + h, g) - posit_surrogate(x - h, g)) / (2 * h)
    rel = np.abs(fd - posit_grad(x, g)) / np.abs(posit_grad(x, g))
    assert rel.max() < 1e-6


@pytest.mark.parametrize("variant", list(V))
def test_boundary_to_peak_ratio(variant):
    g = PositGrid.from_variant(variant)
    a = g.alphas
    for lo, hi in zip(a[:-1], a[1:]):
        ratio = posit_grad(lo, g) / posit_grad(0.5 * (lo + hi), g)
        assert ratio == pytest.approx(1 / math.cosh(2.5) ** 2, abs=1e-3)
        assert ratio < 0.03


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3))
def test_posit_grad_finite_and_nonnegative(x):
    for v in V:
        gv = posit_grad(x, PositGrid.from_variant(v))
        assert np.isfinite(gv) and gv >= 0
