"""Comparison controller and evaluation machinery: receding-horizon MPC on a
linear model, and seeded Monte-Carlo return estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffqp import QpData, SoftConfig, solve


def solve_dare(A, B, Q, R, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Structured doubling iteration; quadratically convergent, stopped at a
    relative fixed-point tolerance of ``tol``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    eye = np.eye(A.shape[0])
    for _ in range(max_iter):
        W = eye + Gk @ Hk
        Winv_A = np.linalg.solve(W, Ak)
        Winv_G = np.linalg.solve(W, Gk)
        A1 = Ak @ Winv_A
        G1 = Gk + Ak @ Winv_G @ Ak.T
        H1 = Hk + Ak.T @ Hk @ Winv_A
        if np.max(np.abs(H1 - Hk)) <= tol * max(1.0, np.max(np.abs(Hk))):
            return 0.5 * (H1 + H1.T)
        Ak, Gk, Hk = A1, G1, H1
    return 0.5 * (Hk + Hk.T)


@dataclass
class MpcProblem:
    """Horizon-N constrained quadratic regulator on a linear model.

    Minimizes ``sum_t (x_t' Qw x_t + u_t' Rw u_t)`` over the horizon,
    subject to state and input boxes. The terminal weight defaults to the
    stage weight (plain truncated cost, deliberately short-sighted);
    ``terminal="riccati"`` substitutes the unconstrained infinite-horizon
    tail instead, and any positive definite matrix is accepted directly.
    """

    A: np.ndarray
    B: np.ndarray
    horizon: int = 10
    state_bound: float = 4.0
    input_bound: float = 1.0
    Qw: Optional[np.ndarray] = None
    Rw: Optional[np.ndarray] = None
    terminal: object = None
    soft: SoftConfig = field(default_factory=SoftConfig)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        n = self.A.shape[0]
        m = self.B.shape[1]
        self.Qw = np.eye(n) if self.Qw is None else np.asarray(self.Qw, dtype=float)
        self.Rw = np.eye(m) if self.Rw is None else np.asarray(self.Rw, dtype=float)
        if self.terminal is None:
            self.terminal = self.Qw.copy()
        elif isinstance(self.terminal, str):
            if self.terminal != "riccati":
                raise ValueError("terminal must be None, 'riccati' or a matrix")
            self.terminal = solve_dare(self.A, self.B, self.Qw, self.Rw)
        else:
            self.terminal = np.asarray(self.terminal, dtype=float)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def m_u(self) -> int:
        return self.B.shape[1]

    def qp_for_state(self, x) -> QpData:
        """Assemble the horizon QP at state ``x``.

        Decision vector order: all inputs ``u_0 .. u_{N-1}`` first, then the
        predicted states ``s_1 .. s_N``. The current state enters the
        equality right-hand sides only (the QP has no separate input
        vector), and the whole problem is posed as a maximization of the
        negated cost.
        """
        x = np.asarray(x, dtype=float).reshape(self.n_x)
        N, n, m = self.horizon, self.n_x, self.m_u
        n_mu = N * m + N * n

        blocks = [2.0 * self.Rw] * N
        blocks += [2.0 * self.Qw] * (N - 1)
        blocks += [2.0 * self.terminal]
        Qmat = np.zeros((n_mu, n_mu))
        at = 0
        for blk in blocks:
            k = blk.shape[0]
            Qmat[at:at + k, at:at + k] = -blk
            at += k

        def u_cols(t):
            return slice(t * m, (t + 1) * m)

        def s_cols(t):
            # t in 1..N
            return slice(N * m + (t - 1) * n, N * m + t * n)

        Beq = np.zeros((N * n, n_mu))
        beq = np.zeros(N * n)
        Beq[0:n, s_cols(1)] = np.eye(n)
        Beq[0:n, u_cols(0)] = -self.B
        beq[0:n] = self.A @ x
        for t in range(1, N):
            r = slice(t * n, (t + 1) * n)
            Beq[r, s_cols(t + 1)] = np.eye(n)
            Beq[r, s_cols(t)] = -self.A
            Beq[r, u_cols(t)] = -self.B
        rows = []
        rhs = []
        for t in range(N):
            sel = np.zeros((m, n_mu))
            sel[:, u_cols(t)] = np.eye(m)
            rows += [sel, -sel]
            rhs += [np.full(m, self.input_bound)] * 2
        for t in range(1, N + 1):
            sel = np.zeros((n, n_mu))
            sel[:, s_cols(t)] = np.eye(n)
            rows += [sel, -sel]
            rhs += [np.full(n, self.state_bound)] * 2
        Dineq = np.vstack(rows)
        dineq = np.concatenate(rhs)
        return QpData.create(Qmat=Qmat, q=np.zeros(n_mu), n_z=0,
                             Dineq=Dineq, dineq=dineq,
                             Beq=Beq, beq=beq)


def mpc_policy(p: MpcProblem, x) -> np.ndarray:
    """First input of the horizon plan from state ``x``."""
    sol = solve(p.qp_for_state(x), soft=p.soft)
    return sol.mu_star[:p.m_u].copy()


def mpc_plan_value(p: MpcProblem, x) -> float:
    """Optimal value (negated plan cost) at state ``x``."""
    sol = solve(p.qp_for_state(x), soft=p.soft)
    return float(sol.value)


@dataclass
class ReturnEstimate:
    """Monte-Carlo estimate of a policy's expected return."""

    mean: float
    std_error: float
    per_rollout: list  # (initial state, return) pairs in rollout order


def rollout_return(env, policy: Callable, x0, gamma: float = 1.0,
                   t_max: int = 200) -> float:
    """Accumulated (optionally discounted) reward of one rollout."""
    x = np.asarray(x0, dtype=float)
    total = 0.0
    disc = 1.0
    for _ in range(t_max):
        if env.is_terminal(x):
            break
        u = policy(x)
        x, r, done = env.step(x, u)
        total += disc * r
        disc *= gamma
        if done:
            break
    return float(total)


def mc_return(env, policy: Callable, n_rollouts: int, seed,
              gamma: float = 1.0, t_max: int = 200) -> ReturnEstimate:
    """Seeded Monte-Carlo return estimate.

    ``seed`` may be an integer, a ``SeedSequence`` or a fresh ``Generator``;
    per-rollout streams are spawned from it so that two calls with the same
    seed draw identical initial states regardless of the policy under test.
    That pairing makes per-state policy comparisons well defined.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    if isinstance(seed, np.random.Generator):
        children = seed.spawn(n_rollouts)
    else:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = [np.random.default_rng(c) for c in ss.spawn(n_rollouts)]
    per = []
    for child in children:
        rng = child if isinstance(child, np.random.Generator) else np.random.default_rng(child)
        x0 = env.reset(rng)
        per.append((x0.copy(), rollout_return(env, policy, x0, gamma=gamma, t_max=t_max)))
    vals = np.array([r for _, r in per])
    std_err = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return ReturnEstimate(mean=float(vals.mean()), std_error=std_err, per_rollout=per)
