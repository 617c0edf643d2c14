"""One parameter set behind the value function, the Q-function and the policy.

The QP curvature is parametrized through a factor (``Qmat`` is negative
definite by construction for any factor value), the exploration covariance
through a lower-triangular matrix with a softplus-floored diagonal, and the
lifting through a small net. Everything that trains lives here; the fixed
action reconstruction ``K`` never does.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from .diffqp import ActionPin, QpData, QpSolution, SoftConfig, backward, solve
from .lifting import Layer, LiftingNet, identity_net, lift, lift_backward

QMAT_RIDGE = 1e-6

_ARRAY_FIELDS = ("Mfactor", "q", "Aeq", "Beq", "beq", "Cineq", "Dineq",
                 "dineq", "Lraw")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class UnifiedParams:
    """Trainable parameter set; evaluation never mutates an instance."""

    Mfactor: np.ndarray
    q: np.ndarray
    Aeq: np.ndarray
    Beq: np.ndarray
    beq: np.ndarray
    Cineq: np.ndarray
    Dineq: np.ndarray
    dineq: np.ndarray
    beta: LiftingNet
    K: np.ndarray
    Lraw: np.ndarray
    sigma_min: float = 1e-3
    soft: SoftConfig = field(default_factory=SoftConfig)

    def __post_init__(self):
        for name in _ARRAY_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        n = self.Mfactor.shape[0]
        self.Lraw = np.atleast_2d(self.Lraw)
        if self.K.shape[1] != n:
            raise ValueError("K column count must match the decision dimension")
        if np.linalg.matrix_rank(self.K) < self.K.shape[0]:
            raise ValueError("K must have full row rank")

    @property
    def n_mu(self) -> int:
        return self.Mfactor.shape[0]

    @property
    def n_z(self) -> int:
        return self.Aeq.shape[1]

    @property
    def m_u(self) -> int:
        return self.K.shape[0]

    @property
    def Qmat(self) -> np.ndarray:
        M = self.Mfactor
        return -(M.T @ M + QMAT_RIDGE * np.eye(M.shape[0]))

    @property
    def Lnoise(self) -> np.ndarray:
        L = np.tril(self.Lraw, -1)
        L[np.diag_indices_from(L)] = self.sigma_min + _softplus(np.diag(self.Lraw))
        return L

    def qp_data(self) -> QpData:
        return QpData(Qmat=self.Qmat, q=self.q, Aeq=self.Aeq, Beq=self.Beq,
                      beq=self.beq, Cineq=self.Cineq, Dineq=self.Dineq,
                      dineq=self.dineq)

    def copy(self) -> "UnifiedParams":
        return UnifiedParams(
            **{name: getattr(self, name).copy() for name in _ARRAY_FIELDS},
            beta=self.beta.copy(), K=self.K.copy(),
            sigma_min=self.sigma_min, soft=self.soft)


@dataclass
class PolicySample:
    """One draw of the Gaussian-perturbed policy, replayable from its noise."""

    u: np.ndarray
    mean: np.ndarray
    log_prob: float
    epsilon: np.ndarray
    _solution: QpSolution = field(default=None, repr=False)


@dataclass
class ThetaGrad:
    """Gradient accumulator matching the trainable fields of UnifiedParams."""

    Mfactor: np.ndarray
    q: np.ndarray
    Aeq: np.ndarray
    Beq: np.ndarray
    beq: np.ndarray
    Cineq: np.ndarray
    Dineq: np.ndarray
    dineq: np.ndarray
    Lraw: np.ndarray
    beta: List[Tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, theta: UnifiedParams) -> "ThetaGrad":
        return cls(
            **{name: np.zeros_like(getattr(theta, name)) for name in _ARRAY_FIELDS},
            beta=[(np.zeros_like(l.W), np.zeros_like(l.b))
                  for l in theta.beta.layers])

    def add_(self, other: "ThetaGrad", scale: float = 1.0) -> "ThetaGrad":
        for name in _ARRAY_FIELDS:
            getattr(self, name).__iadd__(scale * getattr(other, name))
        for (W, b), (oW, ob) in zip(self.beta, other.beta):
            W += scale * oW
            b += scale * ob
        return self

    def scale_(self, s: float) -> "ThetaGrad":
        for name in _ARRAY_FIELDS:
            getattr(self, name).__imul__(s)
        for W, b in self.beta:
            W *= s
            b *= s
        return self

    def norm(self) -> float:
        total = 0.0
        for name in _ARRAY_FIELDS:
            total += float(np.sum(getattr(self, name) ** 2))
        for W, b in self.beta:
            total += float(np.sum(W ** 2) + np.sum(b ** 2))
        return float(np.sqrt(total))

    def clip_(self, max_norm: float) -> "ThetaGrad":
        n = self.norm()
        if n > max_norm > 0:
            self.scale_(max_norm / n)
        return self


def apply_update(theta: UnifiedParams, grad: ThetaGrad,
                 scale: float = 1.0) -> UnifiedParams:
    """New parameter set ``theta + scale * grad``.

    The curvature stays negative definite for any step; this is asserted by
    factorizing the updated curvature.
    """
    new = theta.copy()
    for name in _ARRAY_FIELDS:
        setattr(new, name, getattr(theta, name) + scale * getattr(grad, name))
    new.beta = LiftingNet([
        Layer(l.W + scale * gW, l.b + scale * gb, l.activation)
        for l, (gW, gb) in zip(theta.beta.layers, grad.beta)])
    np.linalg.cholesky(-new.Qmat)
    return new


# ---------------------------------------------------------------------------
# Evaluation


def value(theta: UnifiedParams, x) -> Tuple[float, QpSolution]:
    """Optimal QP value at the lifted state."""
    z = lift(theta.beta, x)
    sol = solve(theta.qp_data(), z, soft=theta.soft)
    return sol.value, sol


def q_value(theta: UnifiedParams, x, u) -> Tuple[float, QpSolution]:
    """Optimal QP value with the reconstructed action pinned to ``u``.

    Always solved softened, so arbitrary off-policy actions stay defined;
    actions outside the feasible set show up as nonzero slack.
    """
    z = lift(theta.beta, x)
    pin = ActionPin(K=theta.K, u=np.asarray(u, dtype=float).reshape(theta.m_u))
    sol = solve(theta.qp_data(), z, pin=pin, soft=theta.soft)
    return sol.value, sol


def policy(theta: UnifiedParams, x) -> np.ndarray:
    """Deterministic action: the reconstruction of the QP maximizer."""
    return policy_with_solution(theta, x)[0]


def policy_with_solution(theta: UnifiedParams, x) -> Tuple[np.ndarray, QpSolution]:
    z = lift(theta.beta, x)
    sol = solve(theta.qp_data(), z, soft=theta.soft)
    return theta.K @ sol.mu_star, sol


def advantage(theta: UnifiedParams, x, u) -> float:
    """Pinned value minus free value; nonpositive up to solver tolerance."""
    qv, _ = q_value(theta, x, u)
    v, _ = value(theta, x)
    return qv - v


def _gaussian_log_prob(L: np.ndarray, delta: np.ndarray) -> Tuple[float, np.ndarray]:
    y = solve_triangular(L, delta, lower=True)
    m = delta.size
    lp = -0.5 * (m * np.log(2.0 * np.pi) + y @ y) - np.log(np.diag(L)).sum()
    return float(lp), y


def sample_action(theta: UnifiedParams, x, noise_source: np.random.Generator) -> PolicySample:
    """Draw ``u = policy(x) + Lnoise @ eps`` with its log density and noise."""
    eps = noise_source.standard_normal(theta.m_u)
    return action_from_noise(theta, x, eps)


def action_from_noise(theta: UnifiedParams, x, epsilon) -> PolicySample:
    """Deterministic replay of a sample from stored noise."""
    epsilon = np.asarray(epsilon, dtype=float).reshape(theta.m_u)
    mean, sol = policy_with_solution(theta, x)
    L = theta.Lnoise
    u = mean + L @ epsilon
    lp, _ = _gaussian_log_prob(L, u - mean)
    return PolicySample(u=u, mean=mean, log_prob=lp, epsilon=epsilon,
                        _solution=sol)


# ---------------------------------------------------------------------------
# Gradients


def _qp_grads_to_theta(theta: UnifiedParams, x, z, sol, upstream_mu,
                       upstream_value) -> ThetaGrad:
    qpg = backward(theta.qp_data(), z, sol, upstream_mu=upstream_mu,
                   upstream_value=upstream_value)
    g = ThetaGrad.zeros(theta)
    G = qpg.d_Qmat
    g.Mfactor[...] = -theta.Mfactor @ (G + G.T)
    g.q[...] = qpg.d_q
    g.Aeq[...] = qpg.d_Aeq
    g.Beq[...] = qpg.d_Beq
    g.beq[...] = qpg.d_beq
    g.Cineq[...] = qpg.d_Cineq
    g.Dineq[...] = qpg.d_Dineq
    g.dineq[...] = qpg.d_dineq
    if np.any(qpg.d_z):
        net_grads, _ = lift_backward(theta.beta, x, qpg.d_z)
        g.beta = [(gW, gb) for gW, gb in net_grads]
    return g


def grad_value(theta: UnifiedParams, x, upstream: float = 1.0,
               solution: Optional[QpSolution] = None) -> ThetaGrad:
    """Gradient of ``upstream * value(theta, x)`` for every trainable field."""
    if upstream == 0.0:
        return ThetaGrad.zeros(theta)
    z = lift(theta.beta, x)
    sol = solution
    if sol is None:
        sol = solve(theta.qp_data(), z, soft=theta.soft)
    return _qp_grads_to_theta(theta, x, z, sol, None, upstream)


def grad_q_value(theta: UnifiedParams, x, u, upstream: float = 1.0,
                 solution: Optional[QpSolution] = None) -> ThetaGrad:
    """Gradient of ``upstream * q_value(theta, x, u)``; ``u`` is data."""
    if upstream == 0.0:
        return ThetaGrad.zeros(theta)
    z = lift(theta.beta, x)
    sol = solution
    if sol is None:
        pin = ActionPin(K=theta.K, u=np.asarray(u, dtype=float).reshape(theta.m_u))
        sol = solve(theta.qp_data(), z, pin=pin, soft=theta.soft)
    return _qp_grads_to_theta(theta, x, z, sol, None, upstream)


def grad_log_prob(theta: UnifiedParams, x, sample: PolicySample,
                  scale: float = 1.0,
                  solution: Optional[QpSolution] = None) -> ThetaGrad:
    """Gradient of ``scale * log pi(sample.u | x)``.

    The mean path chains the Gaussian score through the QP maximizer; the
    noise-scale path differentiates the log density with respect to the raw
    lower-triangular parameter.
    """
    if scale == 0.0:
        return ThetaGrad.zeros(theta)
    z = lift(theta.beta, x)
    sol = solution if solution is not None else getattr(sample, "_solution", None)
    if sol is None:
        sol = solve(theta.qp_data(), z, soft=theta.soft)
    mean = theta.K @ sol.mu_star
    L = theta.Lnoise
    delta = np.asarray(sample.u, dtype=float).reshape(theta.m_u) - mean
    y = solve_triangular(L, delta, lower=True)
    a = solve_triangular(L.T, y, lower=False)  # d log_prob / d mean

    g = _qp_grads_to_theta(theta, x, z, sol, scale * (theta.K.T @ a), 0.0)

    G_L = np.outer(a, y)
    G_L[np.diag_indices_from(G_L)] -= 1.0 / np.diag(L)
    G_L = np.tril(G_L)
    raw_diag = np.diag(theta.Lraw)
    diag_chain = np.diag(G_L) * _sigmoid(raw_diag)
    G_raw = np.tril(G_L, -1)
    G_raw[np.diag_indices_from(G_raw)] = diag_chain
    g.Lraw += scale * G_raw
    return g


def random_params(rng: np.random.Generator, n_x: int, m_u: int, *,
                  n_z: Optional[int] = None, n_mu: Optional[int] = None,
                  m_in_extra: int = 2, input_bound: float = 1.0,
                  sigma0: float = 0.1, sigma_min: float = 1e-3,
                  soft: Optional[SoftConfig] = None,
                  beta: Optional[LiftingNet] = None) -> UnifiedParams:
    """Random but well-posed parameter set.

    Guarantees hard input-box rows on the reconstructed action and a
    curvature factor near the identity; everything else is small noise.
    """
    n_z = n_x if n_z is None else n_z
    n_mu = max(m_u + 2, n_x) if n_mu is None else n_mu
    Mfactor = np.eye(n_mu) + 0.1 * rng.normal(size=(n_mu, n_mu))
    q = 0.1 * rng.normal(size=n_mu)
    K = np.zeros((m_u, n_mu))
    K[:, :m_u] = np.eye(m_u)
    rows = [K, -K]
    rhs = [np.full(m_u, input_bound)] * 2
    for _ in range(m_in_extra):
        rows.append(0.3 * rng.normal(size=(1, n_mu)))
        rhs.append(np.array([1.0 + rng.uniform()]))
    Dineq = np.vstack(rows)
    dineq = np.concatenate(rhs)
    Cineq = 0.1 * rng.normal(size=(Dineq.shape[0], n_z))
    if beta is None:
        beta = identity_net(n_x) if n_z == n_x else None
    if beta is None:
        raise ValueError("supply a lifting when n_z differs from n_x")
    from .lifting import _noise_raw

    return UnifiedParams(
        Mfactor=Mfactor, q=q, Aeq=np.zeros((0, n_z)), Beq=np.zeros((0, n_mu)),
        beq=np.zeros(0), Cineq=Cineq, Dineq=Dineq, dineq=dineq, beta=beta,
        K=K, Lraw=_noise_raw(sigma0, m_u, sigma_min), sigma_min=sigma_min,
        soft=soft if soft is not None else SoftConfig())
