#!/usr/bin/env python

import math

import numpy as np
import pytest
from scipy.special import softmax

from cdsl.numerics import l2_normalize, l2_normalize_backward, softmax_temp, log_softmax_temp, entropy, \
    cross_entropy_at, finite_diff_check
from cdsl.utils import NormTooSmall, InvalidTemperature, InfiniteLoss, IndexOutOfRange, InvalidDistribution


def test_l2_normalize_examples():
    assert np.allclose(l2_normalize([3., 4.]), [0.6, 0.8], rtol=0, atol=1e-15)
    unit = np.array([0., 1., 0.])
    assert np.array_equal(l2_normalize(unit), unit)
    with pytest.raises(NormTooSmall):
        l2_normalize([0., 0.])


def test_l2_normalize_rows_and_idempotence(rng):
    v = rng.standard_normal((20, 5))
    f = l2_normalize(v)
    assert np.allclose(np.linalg.norm(f, axis=1), 1., rtol=0, atol=1e-12)
    assert np.allclose(l2_normalize(f), f, rtol=0, atol=1e-12)


def test_l2_normalize_backward_examples():
    assert np.allclose(l2_normalize_backward([1., 0.], [0., 1.]), [0., 1.])
    assert np.allclose(l2_normalize_backward([2., 0.], [1., 0.]), [0., 0.])
    with pytest.raises(NormTooSmall):
        l2_normalize_backward([0., 0.], [1., 0.])


def test_l2_normalize_backward_matches_finite_differences(rng):
    for _ in range(20):
        v = rng.standard_normal(6)
        upstream = rng.standard_normal(6)
        error = finite_diff_check(lambda x_: float(upstream @ l2_normalize(x_)),
                                  l2_normalize_backward(v, upstream), v)
        assert error < 1e-6


def test_softmax_temp():
    assert np.allclose(softmax_temp([0.3] * 4, 0.05), 0.25)
    p = softmax_temp([1., 0.], 0.05)
    expected = 1. / (1. + math.exp(-20.))
    assert p[0] == pytest.approx(expected, abs=1e-15)
    assert p[1] == pytest.approx(math.exp(-20.) / (1. + math.exp(-20.)), rel=1e-12)
    assert p.sum() == pytest.approx(1., abs=1e-12)


def test_softmax_temp_shift_invariance_and_large_scores(rng):
    scores = rng.uniform(-1, 1, size=10)
    assert np.allclose(softmax_temp(scores + 7., 0.05), softmax_temp(scores, 0.05), rtol=0, atol=1e-12)
    p = softmax_temp([1000., 999.], 0.05)
    assert np.all(np.isfinite(p))
    assert np.allclose(np.exp(log_softmax_temp(scores, 0.5)), softmax(scores / 0.5))


@pytest.mark.parametrize("tau", [0., -0.05])
def test_invalid_temperature(tau):
    with pytest.raises(InvalidTemperature):
        softmax_temp([1., 2.], tau)
    with pytest.raises(ValueError):
        log_softmax_temp([1., 2.], tau)


def test_entropy_examples():
    assert entropy(np.full(7, 1. / 7.)) == pytest.approx(math.log(7.), abs=1e-12)
    assert entropy([0., 1., 0.]) == 0.
    assert entropy([0.5, 0.5]) == pytest.approx(0.6931471805599453, abs=1e-12)
    with pytest.raises(InvalidDistribution):
        entropy([0.7, 0.7])
    with pytest.raises(InvalidDistribution):
        entropy([1.5, -0.5])


def test_entropy_bounds(rng):
    for n_entries in range(1, 30):
        p = softmax_temp(rng.standard_normal(n_entries), 0.3)
        ent = entropy(p)
        assert 0. <= ent <= math.log(n_entries) + 1e-12


def test_cross_entropy_at():
    assert cross_entropy_at([0.25] * 4, 2) == pytest.approx(math.log(4.), abs=1e-12)
    assert cross_entropy_at([0., 1., 0.], 1) == 0.
    assert cross_entropy_at([0.25, 0.75], 0) == pytest.approx(math.log(4.), abs=1e-12)
    with pytest.raises(InfiniteLoss):
        cross_entropy_at([1., 0.], 1)
    with pytest.raises(IndexOutOfRange):
        cross_entropy_at([0.5, 0.5], 2)
    with pytest.raises(IndexOutOfRange):
        cross_entropy_at([0.5, 0.5], -1)


def test_finite_diff_check_examples(rng):
    x = np.array([1., 2.])
    assert finite_diff_check(lambda v: float(v @ v), 2. * x, x, h=1e-5) < 1e-8
    assert finite_diff_check(lambda v: 3., np.zeros(3), np.ones(3)) == 0.
    # an obviously wrong gradient is reported
    assert finite_diff_check(lambda v: float(v @ v), x, x) > 0.1


def test_entropy_of_softmax_gradient(rng):
    tau = 0.5
    for _ in range(20):
        z = rng.standard_normal(8)
        p = softmax_temp(z, tau)
        ent = entropy(p)
        analytic = -p * (np.log(p) + ent) / tau
        assert finite_diff_check(lambda v: float(entropy(softmax_temp(v, tau))), analytic, z) < 1e-5
