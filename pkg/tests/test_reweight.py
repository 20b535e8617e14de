import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradsteer import reweight
from gradsteer.reweight import (BatchPMF, ClassBias, Curriculum, EpochClock, Robust, Uniform, biased_update,
                                softmax_pmf, weighted_objective, weighting_values)

finite = st.floats(-700, 700, allow_nan=False)
logits = st.integers(1, 64).flatmap(lambda n: arrays(np.float64, n, elements=finite))


def test_robust_zero_alpha_gives_zeros():
    f = weighting_values(Robust(0.0), [3.0, -1.0, 40.0])
    assert np.all(f == 0)


def test_robust_scales_losses():
    np.testing.assert_allclose(weighting_values(Robust(0.2), [-5.0, 5.0]), [-1.0, 1.0], atol=1e-15)


def test_curriculum_beta_schedule():
    mode = Curriculum()
    assert mode.beta(EpochClock(epoch=0)) == pytest.approx(-0.1, abs=1e-15)
    assert mode.beta(EpochClock(epoch=20)) == pytest.approx(-0.05, abs=1e-15)
    f = weighting_values(mode, [2.0, -4.0], clock=EpochClock(epoch=0))
    np.testing.assert_allclose(f, [-0.2, 0.4])


def test_curriculum_per_step_switch():
    mode = Curriculum(per_step=True)
    assert mode.beta(EpochClock(epoch=0, step=20)) == pytest.approx(-0.05)


def test_class_bias_values_and_missing():
    mode = ClassBias({0: 3.0, 1: 0.0})
    np.testing.assert_array_equal(weighting_values(mode, [1.0, 2.0, 3.0], [0, 1, 0]), [3.0, 0.0, 3.0])
    with pytest.raises(reweight.MissingClassWeight):
        weighting_values(mode, [1.0], [2])
    with pytest.raises(reweight.MissingClassWeight):
        weighting_values(mode, [1.0])


def test_mode_validation():
    with pytest.raises(reweight.ReweightError):
        Robust(-0.1)
    with pytest.raises(reweight.ReweightError):
        Curriculum(a=0.0)
    with pytest.raises(reweight.ReweightError):
        ClassBias({0: 1.0}, granularity="frame")


def test_uniform_pmf_batch_28():
    pmf = softmax_pmf(np.full(28, 2.5))
    np.testing.assert_allclose(pmf.weights, 1 / 28, rtol=0, atol=1e-15)
    assert pmf.entropy == pytest.approx(math.log(28))
    assert pmf.max_weight == pytest.approx(1 / 28)


def test_closed_form_two_units():
    np.testing.assert_allclose(softmax_pmf([0.0, math.log(2)]).weights, [1 / 3, 2 / 3], atol=1e-15)


def test_empty_batch():
    with pytest.raises(reweight.EmptyBatch):
        softmax_pmf([])


def test_mask_zeroes_units():
    pmf = softmax_pmf([1.0, 100.0, 1.0], mask=[True, False, True])
    np.testing.assert_allclose(pmf.weights, [0.5, 0.0, 0.5])


@settings(max_examples=200, deadline=None)
@given(logits, st.floats(-1e3, 1e3))
def test_normalized_and_shift_invariant(f, c):
    p = softmax_pmf(f).weights
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-9
    np.testing.assert_allclose(softmax_pmf(f + c).weights, p, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-40, 40), min_size=2, max_size=30, unique=True), st.floats(0.01, 1.0))
def test_robust_monotone(losses, alpha):
    losses = np.asarray(losses)
    p = softmax_pmf(weighting_values(Robust(alpha), losses)).weights
    order = np.argsort(losses)
    gaps = np.diff(alpha * losses[order])
    strict = gaps > 1e-12  # below this the softmax cannot resolve the difference
    assert np.all(np.diff(p[order])[strict] > 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-40, 40), min_size=2, max_size=30, unique=True), st.integers(0, 100))
def test_curriculum_monotone(losses, epoch):
    losses = np.asarray(losses)
    mode = Curriculum()
    p = softmax_pmf(weighting_values(mode, losses, clock=EpochClock(epoch=epoch))).weights
    order = np.argsort(losses)
    gaps = np.diff(abs(mode.beta(EpochClock(epoch=epoch))) * losses[order])
    strict = gaps > 1e-12
    assert np.all(np.diff(p[order])[strict] < 0)


def test_uniform_recovery_limits():
    losses = np.random.default_rng(0).uniform(-30, 30, 16)
    uniform = np.full(16, 1 / 16)
    np.testing.assert_allclose(softmax_pmf(weighting_values(Robust(0.0), losses)).weights, uniform, atol=1e-12)
    np.testing.assert_allclose(softmax_pmf(weighting_values(Uniform(), losses)).weights, uniform, atol=1e-12)
    const = ClassBias({0: 2.0, 1: 2.0})
    classes = np.arange(16) % 2
    np.testing.assert_allclose(softmax_pmf(weighting_values(const, losses, classes)).weights, uniform, atol=1e-12)
    # late enough that |beta| * max|L| < 1e-6
    mode = Curriculum()
    epoch = int(2 * (np.abs(losses).max() / 1e-6))
    clock = EpochClock(epoch=epoch)
    assert abs(mode.beta(clock)) * np.abs(losses).max() < 1e-6
    p = softmax_pmf(weighting_values(mode, losses, clock=clock)).weights
    assert np.max(np.abs(p - 1 / 16)) < 1e-6


def test_no_overflow_extreme_logits():
    pmf = softmax_pmf([-700.0, 700.0, 699.0])
    assert np.all(np.isfinite(pmf.weights))
    assert pmf.weights[1] == pytest.approx(1 / (1 + math.exp(-1)))


def test_biased_update_uniform_is_mean():
    g = np.random.default_rng(1).standard_normal((5, 7))
    np.testing.assert_allclose(biased_update(g, BatchPMF.uniform(5)), g.mean(0), atol=1e-15)


def test_biased_update_one_hot():
    g = np.random.default_rng(2).standard_normal((4, 3))
    assert np.array_equal(biased_update(g, BatchPMF.one_hot(4, 2)), g[2])


def test_biased_update_elementwise_oracle():
    rng = np.random.default_rng(3)
    g = rng.standard_normal((3, 6))
    p = softmax_pmf(rng.standard_normal(3))
    expected = np.array([sum(p.weights[i] * g[i, d] for i in range(3)) for d in range(6)])
    np.testing.assert_allclose(biased_update(g, p), expected, atol=1e-12)
    np.testing.assert_allclose(biased_update(torch.tensor(g), p).numpy(), expected, atol=1e-12)
    with pytest.raises(reweight.DimensionMismatch):
        biased_update(g[:2], p)


def test_weighted_objective_values():
    losses = torch.tensor([1.0, 2.0, 6.0], dtype=torch.float64)
    assert float(weighted_objective(losses, BatchPMF.uniform(3))) == pytest.approx(3.0)
    assert float(weighted_objective(losses, BatchPMF.one_hot(3, 1))) == 2.0


def test_weighted_objective_gradient_is_biased_update():
    rng = np.random.default_rng(4)
    a = torch.tensor(rng.standard_normal((4, 5)))
    x = torch.tensor(rng.standard_normal(5), requires_grad=True)
    losses = torch.tanh(a @ x) ** 2 + (a @ x)
    pmf = softmax_pmf(losses.detach().numpy() * 0.3)
    (grad,) = torch.autograd.grad(weighted_objective(losses, pmf), x, retain_graph=True)
    per_unit = torch.stack([torch.autograd.grad(losses[i], x, retain_graph=True)[0] for i in range(4)])
    expected = biased_update(per_unit, pmf)
    assert torch.linalg.norm(grad - expected) / torch.linalg.norm(expected) < 1e-12
