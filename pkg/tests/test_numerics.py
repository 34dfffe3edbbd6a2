import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lilac.numerics import (
    ConfigError, ContractError, DimensionError, GroupNorm, LrSchedule, NonFiniteError, OptimizerState,
    adamw_step, backward, clip_grad_norm, conv1d, dtype_for, grad_check, group_norm, lr_at, make_rng,
)

from conftest import naive_conv1d


def test_rng_streams_are_reproducible_and_split():
    a = make_rng(7, 1, 2).standard_normal(5)
    b = make_rng(7, 1, 2).standard_normal(5)
    c = make_rng(7, 1, 3).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_dtype_for():
    assert dtype_for("f32") is torch.float32
    assert dtype_for("f64") is torch.float64
    with pytest.raises(ConfigError):
        dtype_for("f16")


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (5, 1), (3, 2), (1, 2)])
def test_conv1d_matches_loop_oracle(rng, k, stride):
    x = rng.standard_normal((3, 8))
    w = rng.standard_normal((4, 3, k))
    b = rng.standard_normal(4)
    got = conv1d(torch.tensor(x), torch.tensor(w), torch.tensor(b), stride=stride).numpy()
    assert np.allclose(got, naive_conv1d(x, w, b, stride), atol=1e-12)


def test_conv1d_batched_equals_per_item(rng):
    x = torch.tensor(rng.standard_normal((5, 2, 6)))
    w = torch.tensor(rng.standard_normal((3, 2, 3)))
    batched = conv1d(x, w)
    for i in range(5):
        assert torch.equal(batched[i], conv1d(x[i], w))


def test_conv1d_rejects_bad_shapes(rng):
    x = torch.zeros(2, 8)
    with pytest.raises(ConfigError):
        conv1d(x, torch.zeros(2, 2, 2))
    with pytest.raises(DimensionError):
        conv1d(x, torch.zeros(2, 3, 3))
    with pytest.raises(DimensionError):
        conv1d(x, torch.zeros(2, 2, 3), torch.zeros(3))
    with pytest.raises(DimensionError):
        conv1d(torch.zeros(2, 7), torch.zeros(2, 2, 3), stride=2)


@settings(max_examples=25, deadline=None)
@given(c_in=st.integers(1, 3), c_out=st.integers(1, 3), half=st.integers(0, 2), t=st.integers(1, 9),
       seed=st.integers(0, 2**16))
def test_conv1d_property_matches_oracle(c_in, c_out, half, t, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((c_in, t))
    w = r.standard_normal((c_out, c_in, 2 * half + 1))
    got = conv1d(torch.tensor(x), torch.tensor(w)).numpy()
    assert np.allclose(got, naive_conv1d(x, w, None), atol=1e-12)


def test_group_norm_matches_manual(rng):
    x = rng.standard_normal((2, 8, 5))
    gamma, beta = rng.standard_normal(8), rng.standard_normal(8)
    got = group_norm(torch.tensor(x), 4, torch.tensor(gamma), torch.tensor(beta)).numpy()
    g = x.reshape(2, 4, -1)
    mu = g.mean(-1, keepdims=True)
    var = g.var(-1, keepdims=True)
    ref = ((g - mu) / np.sqrt(var + 1e-5)).reshape(x.shape) * gamma[None, :, None] + beta[None, :, None]
    assert np.allclose(got, ref, atol=1e-10)


def test_group_norm_module_picks_divisor():
    assert GroupNorm(12).groups == 6
    assert GroupNorm(64).groups == 8
    assert GroupNorm(5).groups == 5


def test_backward_needs_scalar_and_accumulates():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(ContractError):
        backward(p * 2)
    backward((p**2).sum())
    backward((p**2).sum())
    assert torch.equal(p.grad, torch.tensor([4.0, 8.0], dtype=torch.float64))
    with pytest.raises(NonFiniteError):
        backward((p * float("nan")).sum())


def test_adamw_step_matches_hand_computation():
    p = torch.tensor([0.5, -1.0], dtype=torch.float64)
    g = torch.tensor([0.2, -0.4], dtype=torch.float64)
    state = OptimizerState.for_params([p], weight_decay=0.1)
    lr = 0.01
    expected = []
    m = np.zeros(2)
    v = np.zeros(2)
    w = p.numpy().copy()
    for step in (1, 2):
        w = w * (1 - lr * 0.1)
        m = 0.9 * m + 0.1 * g.numpy()
        v = 0.999 * v + 0.001 * g.numpy() ** 2
        w = w - lr * (m / (1 - 0.9**step)) / (np.sqrt(v / (1 - 0.999**step)) + 1e-8)
        expected.append(w.copy())
    adamw_step([p], [g], state, lr)
    assert np.allclose(p.numpy(), expected[0], atol=1e-15)
    adamw_step([p], [g], state, lr)
    assert np.allclose(p.numpy(), expected[1], atol=1e-15)
    assert state.step == 2


def test_adamw_first_step_moves_by_lr():
    # bias correction makes the first step exactly lr * sign(g) (up to eps) with no decay
    p = torch.zeros(3, dtype=torch.float64)
    g = torch.tensor([3.0, -0.01, 7.0], dtype=torch.float64)
    adamw_step([p], [g], OptimizerState.for_params([p], weight_decay=0.0), 1e-3)
    assert np.allclose(p.numpy(), -1e-3 * np.sign(g.numpy()), rtol=1e-5)


def test_adamw_rejects_mismatch():
    p = torch.zeros(2)
    state = OptimizerState.for_params([p])
    with pytest.raises(DimensionError):
        adamw_step([p], [torch.zeros(3)], state, 1e-3)
    with pytest.raises(ContractError):
        adamw_step([p], [torch.zeros(2)], state, -1.0)


def test_clip_grad_norm():
    g = [torch.tensor([3.0, 4.0], dtype=torch.float64)]
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert torch.linalg.norm(g[0]).item() == pytest.approx(1.0)
    assert clip_grad_norm([None], 1.0) == 0.0


def test_lr_schedule_shape():
    s = LrSchedule(base_lr=1e-3, warmup_steps=10, total_steps=110, min_lr=1e-5)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(5e-4)
    assert lr_at(s, 10) == pytest.approx(1e-3)
    assert lr_at(s, 60) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))
    assert lr_at(s, 110) == 1e-5
    assert lr_at(s, 10_000) == 1e-5
    values = [lr_at(s, i) for i in range(10, 111)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_schedule_validation():
    with pytest.raises(ConfigError):
        LrSchedule(warmup_steps=10, total_steps=10)
    with pytest.raises(ConfigError):
        LrSchedule(base_lr=1e-5, min_lr=1e-4)
    with pytest.raises(ContractError):
        lr_at(LrSchedule(), -1)


def test_grad_check_on_known_function():
    w = torch.tensor([[0.3, -0.2], [0.1, 0.4]], dtype=torch.float64, requires_grad=True)
    x = torch.tensor([1.0, 2.0], dtype=torch.float64)
    err = grad_check(lambda: torch.tanh(w @ x).pow(2).sum(), [w])
    assert err <= 1e-6


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(3).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=torch.float64)

    p = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: Wrong.apply(p), [p]) > 0.1


def test_grad_check_guards():
    p = torch.ones(2, requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: p.sum(), [p])
    q = torch.ones(2, dtype=torch.float64, requires_grad=True)
    calls = iter(range(100))
    with pytest.raises(ContractError):
        grad_check(lambda: q.sum() + next(calls), [q])
