import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cagan.engine import ParameterError, Tensor, UsageError
from cagan.losses import (adversarial_generator_loss, cgan_loss, classifier_loss, coupled_loss,
                          coupled_value, coupled_value_expanded, generator_objective)
from cagan.variants import VARIANTS


def val(t):
    return float(t.data)


def test_cgan_loss_half():
    assert val(cgan_loss(np.array([0.5]), np.array([0.5]))) == pytest.approx(2 * math.log(0.5), abs=1e-15)


def test_cgan_loss_perfect_discriminator():
    assert val(cgan_loss(np.array([1.0]), np.array([0.0]))) == pytest.approx(0.0, abs=1e-6)


def test_cgan_loss_equal_scores_peak_at_half():
    grid = np.linspace(0.01, 0.99, 99)
    values = [val(cgan_loss(np.array([p]), np.array([p]))) for p in grid]
    np.testing.assert_allclose(values, np.log(grid) + np.log1p(-grid), rtol=1e-12)
    assert grid[int(np.argmax(values))] == pytest.approx(0.5)


def test_classifier_loss_examples():
    assert val(classifier_loss(np.array([[0.0, 1.0, 0.0]]), [1])) == pytest.approx(0.0, abs=1e-6)
    assert val(classifier_loss(np.full((1, 6), 1 / 6), [3])) == pytest.approx(math.log(6), abs=1e-12)


def test_classifier_loss_decreases_with_true_probability():
    grid = np.linspace(0.05, 0.95, 40)
    losses = [val(classifier_loss(np.array([[1 - p, p]]), [1])) for p in grid]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert min(losses) >= 0


def test_generator_objective_examples():
    assert val(generator_objective(np.array([0.5]), 1.0, 1.0, "h")) == pytest.approx(math.log(2) + 1, abs=1e-12)
    pure = val(generator_objective(np.array([0.3]), 2.0, 0.0, "g"))
    assert pure == pytest.approx(val(adversarial_generator_loss(np.array([0.3]))))
    assert val(generator_objective(np.array([0.3]), None, 1.0, "f")) == pytest.approx(-math.log(0.3))


def test_generator_objective_errors():
    with pytest.raises(ParameterError):
        generator_objective(np.array([0.5]), 1.0, -0.1, "h")
    with pytest.raises(UsageError):
        generator_objective(np.array([0.5]), None, 1.0, "h")
    with pytest.raises(UsageError):
        generator_objective(np.array([0.5]), 1.0, 1.0, "d")


def test_generator_objective_decreasing_in_d_fake():
    ps = np.linspace(0.01, 0.99, 50)
    vals = [val(generator_objective(np.array([p]), 0.7, 1.0, "h")) for p in ps]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@given(st.floats(0.01, 0.99), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 3.0))
def test_generator_objective_affine_in_lc(d, lc1, lc2, lam):
    f = lambda lc: val(generator_objective(np.array([d]), lc, lam, "h"))
    if abs(lc2 - lc1) > 1e-3:
        assert (f(lc2) - f(lc1)) / (lc2 - lc1) == pytest.approx(lam, abs=1e-9)


def test_saturating_form():
    assert val(adversarial_generator_loss(np.array([0.25]), saturating=True)) == pytest.approx(math.log(0.75))


def test_coupled_all_half():
    half = np.array([0.5, 0.5])
    report = coupled_loss(half, half, half, half, l_c=0.0, lambda1=1.0)
    assert report.coupled_total == pytest.approx(4 * math.log(0.5), abs=1e-15)


def test_coupled_lambda_zero_is_two_cgans(rng):
    p = [rng.uniform(0.05, 0.95, 8) for _ in range(4)]
    expected = val(cgan_loss(p[0], p[1])) + val(cgan_loss(p[2], p[3]))
    assert coupled_value(*p, 3.0, 0.0) == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 10_000))
def test_coupled_composed_matches_expanded(seed):
    r = np.random.default_rng(seed)
    p = [r.uniform(1e-4, 1 - 1e-4, r.integers(1, 33)) for _ in range(4)]
    lc, lam = float(r.uniform(0, 5)), float(r.uniform(0, 3))
    total = coupled_value(*p, lc, lam)
    assert abs(total - coupled_value_expanded(*p, lc, lam)) <= 1e-12 * max(1.0, abs(total))
    assert coupled_loss(*p, l_c=lc, lambda1=lam).coupled_total == total


def test_coupled_missing_components():
    half = np.array([0.5])
    with pytest.raises(UsageError):
        coupled_loss(half, half, None, None)
    with pytest.raises(UsageError):
        coupled_loss(half, half, half, half, variant="g")
    report = coupled_loss(None, None, l_c=0.4, variant="c")
    assert report.classifier_loss == 0.4


def test_variant_flag_table():
    table = {vid: (v.has_context, v.has_aux, v.has_discriminators, v.has_classifier) for vid, v in VARIANTS.items()}
    assert table == {
        "a": (False, False, False, True), "b": (True, False, False, True), "c": (True, True, False, True),
        "d": (False, False, True, False), "e": (False, False, True, True), "f": (True, False, True, False),
        "g": (True, False, True, True), "h": (True, True, True, True),
    }


def test_losses_are_differentiable():
    p = Tensor(np.array([0.3, 0.6]), requires_grad=True)
    adversarial_generator_loss(p).backward()
    np.testing.assert_allclose(p.grad, -1 / (2 * p.data))
