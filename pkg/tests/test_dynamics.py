import math

import numpy as np
import pytest

from ipgsim.dynamics import (
    AgentState,
    ControlInput,
    Limits,
    linearize,
    rollout,
    step,
    wrap_angle,
)


def test_step_constant_velocity_along_x():
    s = np.array([0.0, 0.0, 0.0, 1.0])
    out = step(s, np.zeros(2), 0.1)
    assert np.allclose(out, [0.1, 0.0, 0.0, 1.0])


def test_step_motion_along_y_with_accel():
    s = np.array([0.0, 0.0, math.pi / 2, 2.0])
    out = step(s, np.array([1.0, 0.0]), 0.1)
    assert np.allclose(out, [0.0, 0.2, math.pi / 2, 2.1])


def test_step_pure_rotation_at_rest():
    s = np.array([1.0, 1.0, 0.0, 0.0])
    out = step(s, np.array([0.0, 0.5]), 0.1)
    assert np.allclose(out, [1.0, 1.0, 0.05, 0.0])


def test_linearize_px_row_and_b_matrix():
    # d(px')/dx = [1, 0, -Ts v sin th, Ts cos th] by differentiating the
    # update equations; at th=0, v=1, Ts=0.1 that is [1, 0, 0, 0.1]
    A, B = linearize(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(2), 0.1)
    assert np.allclose(A[0], [1.0, 0.0, 0.0, 0.1])
    expected_B = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.1], [0.1, 0.0]])
    assert np.allclose(B, expected_B)


def _fd_jacobians(s, u, ts, h=1e-5):
    A = np.zeros((4, 4))
    B = np.zeros((4, 2))
    for k in range(4):
        dp = s.copy(); dp[k] += h
        dm = s.copy(); dm[k] -= h
        A[:, k] = (step(dp, u, ts) - step(dm, u, ts)) / (2 * h)
    for k in range(2):
        dp = u.copy(); dp[k] += h
        dm = u.copy(); dm[k] -= h
        B[:, k] = (step(s, dp, ts) - step(s, dm, ts)) / (2 * h)
    return A, B


def test_linearize_matches_central_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        s = rng.uniform([-5, -5, -math.pi, -0.6], [5, 5, math.pi, 1.5])
        u = rng.uniform([-1, -1], [1, 1])
        A, B = linearize(s, u, 0.1)
        A_fd, B_fd = _fd_jacobians(s, u, 0.1)
        scale = 1.0 + max(np.abs(A_fd).max(), np.abs(B_fd).max())
        worst = max(worst, np.abs(A - A_fd).max() / scale, np.abs(B - B_fd).max() / scale)
    assert worst < 1e-5


def test_rollout_fixed_point_at_rest():
    x0 = np.array([1.0, 2.0, 0.3, 0.0])
    X = rollout(x0, np.zeros((5, 2)), 0.1)
    assert X.shape == (6, 4)
    assert np.allclose(X, x0)


def test_rollout_single_step_equals_step():
    x0 = np.array([0.0, 0.0, 0.2, 0.7])
    U = np.array([[0.5, -0.3]])
    X = rollout(x0, U, 0.1)
    assert np.allclose(X[1], step(x0, U[0], 0.1))


def test_rollout_mirror_symmetry():
    # reversing v and rotating heading by pi retraces px
    x0 = np.array([0.0, 0.0, 0.0, 0.8])
    U = np.random.default_rng(3).uniform(-1, 1, size=(10, 2))
    X = rollout(x0, U, 0.1)
    x0m = np.array([0.0, 0.0, math.pi, -0.8])
    Um = U.copy()
    Um[:, 0] *= -1.0
    Xm = rollout(x0m, Um, 0.1)
    assert np.allclose(X[:, 0], Xm[:, 0], atol=1e-12)


def test_rollout_prefix_concatenation():
    rng = np.random.default_rng(11)
    x0 = rng.uniform(-1, 1, size=4)
    U1 = rng.uniform(-1, 1, size=(4, 2))
    U2 = rng.uniform(-1, 1, size=(3, 2))
    X_full = rollout(x0, np.vstack([U1, U2]), 0.1)
    X1 = rollout(x0, U1, 0.1)
    X2 = rollout(X1[-1], U2, 0.1)
    assert np.allclose(X_full[: len(X1)], X1)
    assert np.allclose(X_full[len(X1) - 1 :], X2)


def test_agent_state_wraps_theta_and_rejects_nonfinite():
    s = AgentState(0.0, 0.0, 3.5 * math.pi, 0.5)
    assert -math.pi < s.theta <= math.pi
    with pytest.raises(ValueError):
        AgentState(math.nan, 0.0, 0.0, 0.0)


def test_wrap_angle_half_open_interval():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert abs(wrap_angle(0.0)) == 0.0


def test_limits_validation_and_clamp():
    with pytest.raises(ValueError):
        Limits(a_min=1.0, a_max=-1.0)
    lim = Limits()
    assert np.allclose(lim.clamp_control(np.array([5.0, -5.0])), [1.0, -1.0])


def test_control_input_finite():
    with pytest.raises(ValueError):
        ControlInput(math.inf, 0.0)
