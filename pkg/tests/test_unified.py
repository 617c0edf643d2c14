"""Shared-parameter model: duality, sampling and gradient correctness."""

import numpy as np
import pytest
from scipy.linalg import solve_triangular

from qprl import unified as U
from qprl.envs import LinearEnv
from qprl.lifting import build_mpc_lifting, sysid_least_squares


def _mpc_theta(seed=0, horizon=10, sigma0=0.1):
    env = LinearEnv()
    rng = np.random.default_rng(seed)
    trans = [(x := rng.uniform(-2, 2, 2), u := rng.uniform(-1, 1, 1),
              env.step(x, u)[0]) for _ in range(20)]
    return build_mpc_lifting(sysid_least_squares(trans), horizon, sigma0=sigma0)


def _random_theta(seed=0):
    return U.random_params(np.random.default_rng(seed), n_x=2, m_u=1)


def test_qmat_negative_definite_for_any_factor():
    rng = np.random.default_rng(0)
    theta = _random_theta()
    for _ in range(5):
        theta.Mfactor = rng.normal(size=theta.Mfactor.shape) * rng.uniform(0, 3)
        eigs = np.linalg.eigvalsh(theta.Qmat)
        assert eigs.max() < 0


def test_value_qvalue_policy_duality():
    rng = np.random.default_rng(1)
    for seed in range(6):
        theta = _random_theta(seed)
        x = rng.uniform(-1, 1, 2)
        v, _ = U.value(theta, x)
        pi_x = U.policy(theta, x)
        qv, _ = U.q_value(theta, x, pi_x)
        assert qv == pytest.approx(v, abs=1e-6)
        for _ in range(10):
            u = rng.uniform(-1, 1, 1)
            assert U.advantage(theta, x, u) <= 1e-6


def test_policy_respects_hard_input_box():
    rng = np.random.default_rng(2)
    theta = _random_theta(3)
    for _ in range(100):
        u = U.policy(theta, rng.uniform(-2, 2, 2))
        assert np.all(np.abs(u) <= 1.0 + 1e-9)


def test_q_value_of_infeasible_action_is_finite_with_slack():
    theta = _random_theta(4)
    qv, sol = U.q_value(theta, np.array([0.3, -0.2]), np.array([5.0]))
    assert np.isfinite(qv)
    assert sol.slack is not None and sol.slack.max() > 1.0


def test_value_bounds_q_value():
    rng = np.random.default_rng(5)
    theta = _mpc_theta()
    x = np.array([0.5, -0.4])
    v, _ = U.value(theta, x)
    for _ in range(50):
        u = rng.uniform(-1, 1, 1)
        qv, _ = U.q_value(theta, x, u)
        assert qv <= v + 1e-6


def test_sample_action_zero_noise_is_mean():
    theta = _random_theta(6)
    x = np.array([0.2, 0.1])
    s = U.action_from_noise(theta, x, np.zeros(1))
    np.testing.assert_allclose(s.u, s.mean)
    L = theta.Lnoise
    expected = -0.5 * np.log(2 * np.pi) - np.log(np.diag(L)).sum()
    assert s.log_prob == pytest.approx(expected, abs=1e-12)


def test_sample_action_statistics():
    theta = _random_theta(7)
    x = np.array([0.1, 0.0])
    rng = np.random.default_rng(8)
    sigma = float(np.diag(theta.Lnoise)[0])
    draws = np.array([U.sample_action(theta, x, rng).u[0] for _ in range(10_000)])
    assert draws.std() == pytest.approx(sigma, rel=0.05)


def test_log_prob_matches_closed_form():
    theta = _random_theta(9)
    x = np.array([0.3, -0.1])
    rng = np.random.default_rng(10)
    s = U.sample_action(theta, x, rng)
    L = theta.Lnoise
    delta = s.u - s.mean
    y = solve_triangular(L, delta, lower=True)
    ref = -0.5 * (1 * np.log(2 * np.pi) + y @ y) - np.log(np.diag(L)).sum()
    assert s.log_prob == pytest.approx(ref, abs=1e-10)


def test_replay_reproduces_sample_bitwise():
    theta = _random_theta(11)
    x = np.array([-0.4, 0.9])
    s = U.sample_action(theta, x, np.random.default_rng(12))
    replay = U.action_from_noise(theta, x, s.epsilon)
    assert np.array_equal(replay.u, s.u)
    assert replay.log_prob == s.log_prob


def test_apply_update_keeps_curvature_negative():
    theta = _random_theta(13)
    rng = np.random.default_rng(14)
    g = U.ThetaGrad.zeros(theta)
    g.Mfactor += rng.normal(size=g.Mfactor.shape) * 10.0
    g.q += rng.normal(size=g.q.shape)
    new = U.apply_update(theta, g, 1.0)
    assert np.linalg.eigvalsh(new.Qmat).max() < 0


def test_grad_value_zero_upstream():
    theta = _random_theta(15)
    g = U.grad_value(theta, np.array([0.4, 0.2]), upstream=0.0)
    assert g.norm() == 0.0


def test_grad_log_prob_zero_scale():
    theta = _random_theta(16)
    s = U.sample_action(theta, np.array([0.1, 0.1]), np.random.default_rng(0))
    g = U.grad_log_prob(theta, np.array([0.1, 0.1]), s, scale=0.0)
    assert g.norm() == 0.0


def test_grad_log_prob_at_mean_only_moves_noise_scale():
    theta = _random_theta(17)
    x = np.array([0.2, -0.3])
    s = U.action_from_noise(theta, x, np.zeros(1))
    g = U.grad_log_prob(theta, x, s, scale=1.0)
    # mean path vanishes at the mode; the log-determinant term remains
    assert np.linalg.norm(g.q) <= 1e-12
    assert np.linalg.norm(g.Mfactor) <= 1e-12
    assert np.abs(g.Lraw).max() > 0.0


def _fd_theta_block(theta, x, fn, block, indices, h=1e-5):
    out = []
    for idx in indices:
        tp = theta.copy()
        tm = theta.copy()
        getattr(tp, block).reshape(-1)[idx] += h
        getattr(tm, block).reshape(-1)[idx] -= h
        out.append((fn(tp) - fn(tm)) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_grad_value_matches_finite_differences(seed):
    theta = _mpc_theta(seed, horizon=3)
    rng = np.random.default_rng(seed + 100)
    x = rng.uniform(-1.5, 1.5, 2)
    g = U.grad_value(theta, x, upstream=1.0)

    def v_of(th):
        return U.value(th, x)[0]

    for block in ("Mfactor", "q", "Aeq", "Beq", "beq", "Dineq", "dineq"):
        arr = getattr(theta, block)
        if arr.size == 0:
            continue
        idxs = rng.choice(arr.size, size=min(5, arr.size), replace=False)
        fd = _fd_theta_block(theta, x, v_of, block, idxs)
        an = getattr(g, block).reshape(-1)[idxs]
        np.testing.assert_allclose(an, fd, rtol=1e-4, atol=1e-7)
    # lifting weights
    h = 1e-5
    for idx in ((0, 0), (1, 1)):
        tp, tm = theta.copy(), theta.copy()
        tp.beta.layers[0].W[idx] += h
        tm.beta.layers[0].W[idx] -= h
        fd = (v_of(tp) - v_of(tm)) / (2 * h)
        assert g.beta[0][0][idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


@pytest.mark.parametrize("seed", [0, 1])
def test_grad_log_prob_matches_finite_differences(seed):
    theta = _mpc_theta(seed, horizon=3)
    x = np.array([0.8, -0.5])
    rng = np.random.default_rng(seed)
    s = U.sample_action(theta, x, rng)
    g = U.grad_log_prob(theta, x, s, scale=1.0)

    def lp_of(th):
        return U.action_from_noise(th, x, np.zeros(1)).log_prob if False else _lp(th)

    def _lp(th):
        mean = U.policy(th, x)
        L = th.Lnoise
        d = s.u - mean
        y = solve_triangular(L, d, lower=True)
        return float(-0.5 * (1 * np.log(2 * np.pi) + y @ y)
                     - np.log(np.diag(L)).sum())

    for block in ("Mfactor", "q", "beq", "Lraw"):
        arr = getattr(theta, block)
        idxs = rng.choice(arr.size, size=min(4, arr.size), replace=False)
        fd = _fd_theta_block(theta, x, _lp, block, idxs)
        an = getattr(g, block).reshape(-1)[idxs]
        np.testing.assert_allclose(an, fd, rtol=2e-4, atol=1e-7)
