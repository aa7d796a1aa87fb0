import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajode.errors import ContractError, DivergenceError
from trajode.model import MLPField
from trajode.odeint import SolverConfig, convergence_order, ode_solve, rk4_step, solve_segments
from trajode.tensor import Tape, Tensor, backward, grad_check


def decay(z):
    return -z


def rotation(z):
    # dz/dt = (-z2, z1)
    return z @ Tensor(np.array([[0.0, 1.0], [-1.0, 0.0]]))


def oscillator(z):
    # dz/dt = (z2, -z1): unit-frequency harmonic oscillator, period 2*pi
    return z @ Tensor(np.array([[0.0, -1.0], [1.0, 0.0]]))


def random_field(seed, dim=3, hidden=5):
    rng = np.random.default_rng(seed)
    return [rng.normal(scale=0.5, size=s) for s in ((dim, hidden), (hidden,), (hidden, dim), (dim,))]


RK4 = SolverConfig("rk4", step=0.01)


def test_exponential_decay():
    z = ode_solve(decay, Tensor([1.0]), 0.0, [1.0], RK4)[0]
    assert abs(z.value[0] - math.exp(-1)) < 1e-5


def test_rotation_quarter_turn():
    z = ode_solve(rotation, Tensor([1.0, 0.0]), 0.0, [math.pi / 2], RK4)[0]
    np.testing.assert_allclose(z.value, [0.0, 1.0], atol=1e-4)


def test_time_equal_to_start_returns_initial_state():
    z0 = Tensor([0.3, -0.2])
    out = ode_solve(rotation, z0, 2.0, [2.0, 2.0], RK4)
    assert out[0] is z0 and out[1] is z0


def test_requested_times_hit_exactly_off_grid():
    # 0.237 is not a multiple of the step; the remainder step lands on it.
    z = ode_solve(decay, Tensor([1.0]), 0.0, [0.237], SolverConfig("rk4", step=0.1))[0]
    assert abs(z.value[0] - math.exp(-0.237)) < 1e-6


def test_convergence_order_decay():
    order = convergence_order(decay, [1.0], 0.0, 1.0, [0.2, 0.1, 0.05, 0.025],
                              reference=lambda t: np.array([math.exp(-t)]))
    assert abs(order - 4.0) < 0.3


def test_convergence_order_oscillator():
    order = convergence_order(oscillator, [1.0, 0.0], 0.0, 2 * math.pi, [0.2, 0.1, 0.05, 0.025],
                              reference=np.array([1.0, 0.0]))
    assert abs(order - 4.0) < 0.3


def test_convergence_order_default_reference():
    order = convergence_order(decay, [1.0], 0.0, 1.0, [0.2, 0.1, 0.05])
    assert abs(order - 4.0) < 0.3


def test_constant_field_is_exact():
    c = Tensor([0.5, -2.0])
    assert convergence_order(lambda z: z * 0.0 + c, [0.0, 0.0], 0.0, 1.0, [0.3, 0.2, 0.1]) == math.inf


def test_convergence_order_needs_three_steps():
    with pytest.raises(ContractError):
        convergence_order(decay, [1.0], 0.0, 1.0, [0.1, 0.05])


def test_oscillator_energy_drift():
    z = ode_solve(oscillator, Tensor([1.0, 0.0]), 0.0, [2 * math.pi],
                  SolverConfig("rk4", step=0.001))[0]
    assert abs(0.5 * float(z.value @ z.value) - 0.5) < 1e-6


def test_unsorted_times_rejected():
    with pytest.raises(ContractError):
        ode_solve(decay, Tensor([1.0]), 0.0, [1.0, 0.5], RK4)
    with pytest.raises(ContractError):
        ode_solve(decay, Tensor([1.0]), 1.0, [0.5], RK4)


def test_step_budget_exceeded():
    with pytest.raises(DivergenceError, match="#0"):
        ode_solve(decay, Tensor([1.0]), 0.0, [10.0], SolverConfig("rk4", step=0.01, max_steps=50))
    with pytest.raises(DivergenceError):
        ode_solve(decay, Tensor([1.0]), 0.0, [10.0],
                  SolverConfig("dopri5", rtol=1e-12, atol=1e-14, max_steps=5))


def test_solver_config_validation():
    for bad in (dict(method="euler"), dict(step=0.0), dict(rtol=0.0), dict(max_steps=0)):
        with pytest.raises(ContractError):
            SolverConfig(**bad)


def test_dopri5_matches_analytic():
    cfg = SolverConfig("dopri5", rtol=1e-9, atol=1e-12)
    out = ode_solve(rotation, Tensor([1.0, 0.0]), 0.0, [0.5, math.pi], cfg)
    np.testing.assert_allclose(out[0].value, [math.cos(0.5), math.sin(0.5)], atol=1e-7)
    np.testing.assert_allclose(out[1].value, [-1.0, 0.0], atol=1e-7)


def test_fused_kernel_matches_generic_composition():
    W1, b1, W2, b2 = random_field(0)
    fused = MLPField(Tensor(W1), Tensor(b1), Tensor(W2), Tensor(b2))
    generic = lambda z: fused(z)
    z = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    h = Tensor(np.array([[0.1], [0.0], [0.3], [0.05]]))
    np.testing.assert_allclose(fused.rk4_step(z, h).value, rk4_step(generic, z, h).value, atol=1e-14)


def test_zero_padding_steps_are_identity():
    W1, b1, W2, b2 = random_field(2)
    field = MLPField(Tensor(W1), Tensor(b1), Tensor(W2), Tensor(b2))
    z0 = Tensor(np.random.default_rng(3).normal(size=(2, 3)))
    durations = Tensor(np.array([[0.4, 0.0], [0.4, 0.7]]))
    states = solve_segments(field, z0, durations, SolverConfig("rk4", step=0.2))
    np.testing.assert_array_equal(states[2].value[0], states[1].value[0])


@settings(max_examples=20, deadline=None)
@given(t1=st.floats(0.0, 2.0), extra=st.floats(0.0, 2.0))
def test_interval_additivity_fixed_step_aligned(t1, extra):
    # Times on the step grid: splitting introduces no new remainder steps.
    h = 0.125
    a, b = round(t1 / h) * h, round((t1 + extra) / h) * h
    cfg = SolverConfig("rk4", step=h)
    direct = ode_solve(oscillator, Tensor([1.0, 0.5]), 0.0, [b], cfg)[0]
    mid = ode_solve(oscillator, Tensor([1.0, 0.5]), 0.0, [a], cfg)[0]
    split = ode_solve(oscillator, mid, a, [b], cfg)[0]
    np.testing.assert_allclose(split.value, direct.value, rtol=0, atol=1e-13)


@settings(max_examples=15, deadline=None)
@given(t1=st.floats(0.0, 2.0), extra=st.floats(0.0, 2.0))
def test_interval_additivity_adaptive(t1, extra):
    cfg = SolverConfig("dopri5", rtol=1e-8, atol=1e-10)
    direct = ode_solve(oscillator, Tensor([1.0, 0.5]), 0.0, [t1 + extra], cfg)[0]
    mid = ode_solve(oscillator, Tensor([1.0, 0.5]), 0.0, [t1], cfg)[0]
    split = ode_solve(oscillator, mid, t1, [t1 + extra], cfg)[0]
    assert np.max(np.abs(split.value - direct.value)) < 10 * cfg.atol + 10 * cfg.rtol


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), method=st.sampled_from(["rk4", "dopri5"]))
def test_solver_gradients_match_finite_differences(seed, method):
    rng = np.random.default_rng(seed)
    arrays = random_field(seed)
    z0 = rng.normal(size=3)
    proj = rng.normal(size=3)
    cfg = SolverConfig(method, step=0.01, rtol=1e-10, atol=1e-12)

    def end_state(z, W1=None):
        params = [Tensor(a) for a in arrays]
        if W1 is not None:
            params[0] = W1
        out = ode_solve(MLPField(*params), z, 0.0, [0.3, 0.8], cfg)[-1]
        return (out * proj).sum()

    assert grad_check(lambda z: end_state(z), z0) < 1e-4
    assert grad_check(lambda w: end_state(Tensor(z0), w), arrays[0]) < 1e-4


def test_gradient_with_respect_to_requested_time():
    # d z(t) / dt = -z(t) for decay.
    tape = Tape()
    t = tape.leaf([0.7])
    z = ode_solve(decay, Tensor([1.0]), 0.0, t, SolverConfig("rk4", step=0.05))[0]
    g = backward(tape, z.sum())
    assert g[t][0] == pytest.approx(-math.exp(-0.7), rel=1e-6)
