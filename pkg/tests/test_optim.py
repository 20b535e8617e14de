import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradsteer import optim
from gradsteer.model import NonFiniteGradient
from gradsteer.optim import AdamState, adam_step, clip_grad_norm, sgd_step

vectors = arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3))


def test_clip_below_threshold_unchanged():
    g = torch.tensor([3.0, 0.0], dtype=torch.float64)
    assert clip_grad_norm(g, 5.0) is g


def test_clip_hand_example():
    out = clip_grad_norm(torch.tensor([6.0, 8.0], dtype=torch.float64), 5.0)
    assert out.tolist() == [3.0, 4.0]


def test_clip_rejects_nonfinite():
    with pytest.raises(NonFiniteGradient):
        clip_grad_norm(torch.tensor([1.0, float("inf")]), 5.0)


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(1e-3, 100))
def test_clip_bound_direction_idempotence(g, max_norm):
    g = torch.tensor(g)
    out = clip_grad_norm(g, max_norm)
    assert float(torch.linalg.vector_norm(out)) <= max_norm * (1 + 1e-12)
    if float(torch.linalg.vector_norm(g)) > 0:
        cos = torch.dot(out, g) / (torch.linalg.vector_norm(out) * torch.linalg.vector_norm(g))
        assert float(cos) == pytest.approx(1.0, abs=1e-12)
    twice = clip_grad_norm(out, max_norm)
    assert torch.allclose(twice, out, rtol=1e-12, atol=0)


def test_adam_zero_delta_keeps_params():
    theta = torch.tensor([1.0, -2.0], dtype=torch.float64)
    state = AdamState.zeros_like(theta)
    new, s = adam_step(theta, state, torch.zeros_like(theta))
    assert torch.equal(new, theta) and s.step_count == 1


def test_adam_first_step_closed_form():
    theta = torch.tensor([0.0], dtype=torch.float64)
    new, _ = adam_step(theta, AdamState.zeros_like(theta, lr=0.001, eps=1e-8), torch.tensor([1.0], dtype=torch.float64))
    assert abs(float(new[0]) - (-0.001 / (1 + 1e-8))) < 1e-12


def test_adam_two_steps_hand_unrolled():
    b1, b2, lr, eps, d = 0.9, 0.999, 0.01, 1e-8, 0.7
    m1, v1 = (1 - b1) * d, (1 - b2) * d * d
    x1 = 1.0 - lr * (m1 / (1 - b1)) / ((v1 / (1 - b2)) ** 0.5 + eps)
    m2, v2 = b1 * m1 + (1 - b1) * d, b2 * v1 + (1 - b2) * d * d
    x2 = x1 - lr * (m2 / (1 - b1**2)) / ((v2 / (1 - b2**2)) ** 0.5 + eps)
    theta = torch.tensor([1.0], dtype=torch.float64)
    state = AdamState.zeros_like(theta, lr=lr)
    delta = torch.tensor([d], dtype=torch.float64)
    theta, state = adam_step(theta, state, delta)
    assert abs(float(theta[0]) - x1) < 1e-12
    theta, state = adam_step(theta, state, delta)
    assert abs(float(theta[0]) - x2) < 1e-12 and state.step_count == 2


def test_adam_deterministic_and_dimension_checked():
    rng = np.random.default_rng(0)
    theta = torch.tensor(rng.standard_normal(10))
    delta = torch.tensor(rng.standard_normal(10))
    state = AdamState.zeros_like(theta)
    a, sa = adam_step(theta, state, delta)
    b, sb = adam_step(theta, state, delta)
    assert torch.equal(a, b) and torch.equal(sa.v, sb.v)
    assert bool((sa.v >= 0).all())
    with pytest.raises(optim.DimensionMismatch):
        adam_step(theta, state, delta[:3])


def test_sgd_examples():
    theta = torch.tensor([1.0, 1.0], dtype=torch.float64)
    assert sgd_step(theta, 0.5, [1.0, -1.0]).tolist() == [0.5, 1.5]
    assert torch.equal(sgd_step(theta, 0.0, [3.0, 4.0]), theta)
    d1, d2 = torch.tensor([0.25, -1.0], dtype=torch.float64), torch.tensor([2.0, 0.5], dtype=torch.float64)
    two = sgd_step(sgd_step(theta, 0.5, d1), 0.5, d2)
    one = sgd_step(theta, 1.0, 0.5 * (d1 + d2))
    assert torch.allclose(two, one, atol=1e-15)
    with pytest.raises(optim.DimensionMismatch):
        sgd_step(theta, 0.1, [1.0])


def test_state_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    theta = torch.tensor(rng.standard_normal(12))
    state = AdamState.zeros_like(theta, lr=3e-4, clip_norm=2.5)
    for _ in range(3):
        theta, state = adam_step(theta, state, torch.tensor(rng.standard_normal(12)))
    optim.save_state(tmp_path / "o.bin", state)
    back = optim.load_state(tmp_path / "o.bin")
    assert back.m.numpy().tobytes() == state.m.numpy().tobytes()
    assert back.v.numpy().tobytes() == state.v.numpy().tobytes()
    assert (back.step_count, back.lr, back.clip_norm) == (3, 3e-4, 2.5)
