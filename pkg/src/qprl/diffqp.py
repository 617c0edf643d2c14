"""Dense parametric quadratic programs: active-set solving and exact
first-order differentiation through the optimality system.

Problems have the form

    maximize    0.5 * mu' Qmat mu + q' mu
    subject to  Aeq z + Beq mu = beq
                Cineq z + Dineq mu <= dineq

with ``Qmat`` negative definite, so the maximizer is unique. ``z`` is a
problem input, not a decision variable. Two optional extensions cover the
remaining use cases:

* a pin constraint ``K mu = u`` that fixes a linear image of the solution,
* a slack relaxation that adds per-row slack ``eps >= 0`` to the
  inequalities (and optionally to the equalities) with a concave penalty
  ``-(rho_lin * sum(eps) + rho_quad * ||eps||^2)``, which keeps every
  instance feasible.

All solves run a primal active-set method on the (possibly slack-extended)
problem, factorizing the negated curvature once per solve. Differentiation
solves the transposed linearized optimality system once and reads off the
gradient of every parameter block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InfeasibleError, MaxIterationsError, SingularKktError

# Residual level accepted from a converged solve.
RESIDUAL_TOL = 1e-8
# Inequality rows within this of their bound count as active.
ACTIVE_TOL = 1e-9
# Curvature floor for slack variables when rho_quad = 0 (strict concavity
# is required by the factorization).
_EPS_CURVATURE_FLOOR = 1e-9
# Damping for the least-squares solve of the linearized optimality system.
_KKT_DAMPING = 1e-10


def _vec(a, n: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    return a


def _mat(a, rows: int, cols: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        a = a.reshape(rows, cols)
    if a.shape != (rows, cols):
        raise ValueError(f"{name} must have shape ({rows}, {cols}), got {a.shape}")
    return a


@dataclass
class QpData:
    """Parameter blocks of one parametric QP instance.

    Empty constraint blocks are represented by 0-row matrices; ``n_z`` may
    be zero, in which case ``z`` carries no information and the constraint
    right-hand sides are pure parameters.
    """

    Qmat: np.ndarray
    q: np.ndarray
    Aeq: np.ndarray
    Beq: np.ndarray
    beq: np.ndarray
    Cineq: np.ndarray
    Dineq: np.ndarray
    dineq: np.ndarray

    def __post_init__(self):
        self.Qmat = np.asarray(self.Qmat, dtype=float)
        if self.Qmat.ndim != 2 or self.Qmat.shape[0] != self.Qmat.shape[1]:
            raise ValueError("Qmat must be square")
        n = self.Qmat.shape[0]
        if n < 1:
            raise ValueError("n_mu must be at least 1")
        if np.max(np.abs(self.Qmat - self.Qmat.T), initial=0.0) > 1e-12:
            raise ValueError("Qmat must be symmetric to 1e-12")
        self.q = _vec(self.q, n, "q")
        self.Beq = np.asarray(self.Beq, dtype=float).reshape(-1, n)
        m_eq = self.Beq.shape[0]
        self.Dineq = np.asarray(self.Dineq, dtype=float).reshape(-1, n)
        m_in = self.Dineq.shape[0]
        Aeq = np.asarray(self.Aeq, dtype=float)
        Cineq = np.asarray(self.Cineq, dtype=float)
        if Aeq.ndim == 2:
            n_z = Aeq.shape[1]
        elif Cineq.ndim == 2:
            n_z = Cineq.shape[1]
        elif m_eq and Aeq.size:
            n_z = Aeq.size // m_eq
        elif m_in and Cineq.size:
            n_z = Cineq.size // m_in
        else:
            n_z = 0
        self.Aeq = _mat(Aeq.reshape(m_eq, -1) if Aeq.size else Aeq, m_eq, n_z, "Aeq")
        self.Cineq = _mat(Cineq.reshape(m_in, -1) if Cineq.size else Cineq, m_in, n_z, "Cineq")
        self.beq = _vec(self.beq, m_eq, "beq")
        self.dineq = _vec(self.dineq, m_in, "dineq")

    @classmethod
    def create(cls, Qmat, q, n_z: int = 0, Aeq=None, Beq=None, beq=None,
               Cineq=None, Dineq=None, dineq=None) -> "QpData":
        """Build an instance, filling absent constraint blocks with 0 rows."""
        Qmat = np.atleast_2d(np.asarray(Qmat, dtype=float))
        n = Qmat.shape[0]
        m_eq = 0 if Beq is None else np.asarray(Beq).reshape(-1, n).shape[0]
        m_in = 0 if Dineq is None else np.asarray(Dineq).reshape(-1, n).shape[0]
        return cls(
            Qmat=Qmat,
            q=q,
            Aeq=np.zeros((m_eq, n_z)) if Aeq is None else Aeq,
            Beq=np.zeros((m_eq, n)) if Beq is None else Beq,
            beq=np.zeros(m_eq) if beq is None else beq,
            Cineq=np.zeros((m_in, n_z)) if Cineq is None else Cineq,
            Dineq=np.zeros((m_in, n)) if Dineq is None else Dineq,
            dineq=np.zeros(m_in) if dineq is None else dineq,
        )

    @property
    def n_mu(self) -> int:
        return self.Qmat.shape[0]

    @property
    def n_z(self) -> int:
        return self.Aeq.shape[1]

    @property
    def m_eq(self) -> int:
        return self.Beq.shape[0]

    @property
    def m_in(self) -> int:
        return self.Dineq.shape[0]


@dataclass
class ActionPin:
    """Extra equality ``K mu = u`` that pins the reconstructed action."""

    K: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.u = _vec(self.u, self.K.shape[0], "u")
        if np.linalg.matrix_rank(self.K) < self.K.shape[0]:
            raise ValueError("pin matrix K must have full row rank")


@dataclass(frozen=True)
class SoftConfig:
    """Slack relaxation of the constraints.

    ``rho_lin`` acts as an exact penalty: feasible problems keep zero slack
    as long as no constraint dual exceeds it. ``rho_quad`` keeps the
    extended problem strictly concave; when it is zero a small internal
    curvature floor is used for the factorization only.
    """

    rho_lin: float = 1e3
    rho_quad: float = 1.0
    soften_equalities: bool = False

    def __post_init__(self):
        if self.rho_lin < 0 or self.rho_quad < 0:
            raise ValueError("penalty weights must be nonnegative")
        if self.rho_lin + self.rho_quad <= 0:
            raise ValueError("at least one penalty weight must be positive")


@dataclass
class QpSolution:
    """Optimal point of one solve, with the context needed to differentiate it.

    ``nu_star`` stacks the equality duals first and the pin duals (if any)
    after them. ``slack`` is present only for softened solves and holds the
    inequality slack; ``eq_slack`` holds the signed equality slack when
    equalities were softened. ``status`` is always ``"optimal"`` on a
    returned solution; failure modes raise instead.
    """

    mu_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    value: float
    active_set: tuple
    slack: Optional[np.ndarray]
    eq_slack: Optional[np.ndarray]
    status: str
    pin: Optional[ActionPin]
    soft: Optional[SoftConfig]
    iterations: int = 0
    # Extended primal/dual vectors kept for the backward pass.
    _w: np.ndarray = field(default=None, repr=False)
    _lam: np.ndarray = field(default=None, repr=False)
    _nu: np.ndarray = field(default=None, repr=False)


@dataclass
class QpGradients:
    """Gradient of one scalar functional with respect to every parameter block."""

    d_Qmat: np.ndarray
    d_q: np.ndarray
    d_Aeq: np.ndarray
    d_Beq: np.ndarray
    d_beq: np.ndarray
    d_Cineq: np.ndarray
    d_Dineq: np.ndarray
    d_dineq: np.ndarray
    d_z: np.ndarray


@dataclass
class _Extended:
    """Slack- and pin-augmented problem in maximization form.

    Column order of the extended variable: ``[mu, eps_in, eps_p, eps_m]``.
    Equality rows: base equalities then pin rows. Inequality rows: base
    inequalities then the nonnegativity rows of each slack column.
    """

    Qx: np.ndarray
    qx: np.ndarray
    E: np.ndarray
    e: np.ndarray
    F: np.ndarray
    f: np.ndarray
    n_mu: int
    n_eps_in: int
    n_pairs: int
    m_in: int
    m_eq: int
    m_pin: int
    rho_lin: float
    rho_quad: float


def _check_z(qp: QpData, z) -> np.ndarray:
    if z is None:
        z = np.zeros(qp.n_z)
    return _vec(z, qp.n_z, "z")


def _extended(qp: QpData, z: np.ndarray, pin: Optional[ActionPin],
              soft: Optional[SoftConfig]) -> _Extended:
    n = qp.n_mu
    m_in, m_eq = qp.m_in, qp.m_eq
    m_pin = 0 if pin is None else pin.K.shape[0]
    n_eps_in = m_in if soft is not None else 0
    n_pairs = (m_eq + m_pin) if (soft is not None and soft.soften_equalities) else 0
    n_w = n + n_eps_in + 2 * n_pairs

    rho_lin = soft.rho_lin if soft is not None else 0.0
    rho_quad = soft.rho_quad if soft is not None else 0.0
    quad = max(rho_quad, _EPS_CURVATURE_FLOOR)

    Qx = np.zeros((n_w, n_w))
    Qx[:n, :n] = qp.Qmat
    if n_w > n:
        Qx[range(n, n_w), range(n, n_w)] = -2.0 * quad
    qx = np.zeros(n_w)
    qx[:n] = qp.q
    qx[n:] = -rho_lin

    E = np.zeros((m_eq + m_pin, n_w))
    E[:m_eq, :n] = qp.Beq
    e = np.empty(m_eq + m_pin)
    e[:m_eq] = qp.beq - qp.Aeq @ z
    if pin is not None:
        E[m_eq:, :n] = pin.K
        e[m_eq:] = pin.u
    if n_pairs:
        p0 = n + n_eps_in
        E[range(m_eq + m_pin), range(p0, p0 + n_pairs)] = 1.0
        E[range(m_eq + m_pin), range(p0 + n_pairs, p0 + 2 * n_pairs)] = -1.0

    n_eps = n_eps_in + 2 * n_pairs
    F = np.zeros((m_in + n_eps, n_w))
    F[:m_in, :n] = qp.Dineq
    if n_eps_in:
        F[range(m_in), range(n, n + n_eps_in)] = -1.0
    F[range(m_in, m_in + n_eps), range(n, n + n_eps)] = -1.0
    f = np.zeros(m_in + n_eps)
    f[:m_in] = qp.dineq - qp.Cineq @ z

    return _Extended(Qx=Qx, qx=qx, E=E, e=e, F=F, f=f, n_mu=n,
                     n_eps_in=n_eps_in, n_pairs=n_pairs, m_in=m_in,
                     m_eq=m_eq, m_pin=m_pin, rho_lin=rho_lin, rho_quad=rho_quad)


def _active_set_min(ext: _Extended, w0: np.ndarray, active0, max_iter: int):
    """Primal active-set minimization of the negated extended objective.

    Starts from a feasible ``w0`` with working set ``active0``, keeps the
    smallest-index pivot rule for both entering and leaving rows, and
    returns ``(w, lam, nu, iterations)`` with ``lam >= 0`` for every
    inequality row.
    """
    P = -ext.Qx
    c = -ext.qx
    E, e, F, f = ext.E, ext.e, ext.F, ext.f
    m_e, m_f = E.shape[0], F.shape[0]
    n_w = P.shape[0]

    cf = cho_factor(P, lower=True)
    w_unc = cho_solve(cf, -c)

    w = np.array(w0, dtype=float)
    active = np.zeros(m_f, dtype=bool)
    for i in active0:
        active[i] = True

    for it in range(max_iter):
        rows = np.flatnonzero(active)
        if m_e or rows.size:
            Ew = np.vstack([E, F[rows]]) if rows.size else E
            ew = np.concatenate([e, f[rows]]) if rows.size else e
            PiET = cho_solve(cf, Ew.T)
            S = Ew @ PiET
            r = Ew @ w_unc - ew
            try:
                y = np.linalg.solve(S, r)
            except np.linalg.LinAlgError:
                y = np.linalg.lstsq(S, r, rcond=None)[0]
            w_eq = w_unc - PiET @ y
        else:
            y = np.zeros(0)
            w_eq = w_unc

        p = w_eq - w
        if np.max(np.abs(p), initial=0.0) <= 1e-11 * (1.0 + np.max(np.abs(w), initial=0.0)):
            lam_w = y[m_e:]
            if lam_w.size == 0 or lam_w.min() >= -ACTIVE_TOL:
                lam = np.zeros(m_f)
                if rows.size:
                    lam[rows] = np.maximum(lam_w, 0.0)
                # Return the exact subproblem optimum, not the last iterate.
                return w_eq, lam, y[:m_e].copy(), it + 1
            # Bland: leave with the smallest row index among negative duals.
            drop = rows[lam_w < -ACTIVE_TOL].min()
            active[drop] = False
            continue

        Fp = F @ p
        gap = f - F @ w
        cand = (~active) & (Fp > 1e-12)
        if np.any(cand):
            ratios = np.full(m_f, np.inf)
            ratios[cand] = np.maximum(gap[cand], 0.0) / Fp[cand]
            amin = ratios.min()
        else:
            amin = np.inf
        if amin < 1.0 - 1e-15:
            alpha = amin
            # Bland: enter with the smallest row index among blockers.
            block = int(np.flatnonzero(ratios <= amin + 1e-12)[0])
            w = w + alpha * p
            active[block] = True
        else:
            w = w_eq

    raise MaxIterationsError(
        f"active-set did not converge within {max_iter} iterations")


def _eq_start(ext: _Extended) -> np.ndarray:
    """Feasible-for-equalities start: min-norm mu plus exact slack fill-in."""
    n = ext.n_mu
    m_e = ext.E.shape[0]
    w0 = np.zeros(ext.Qx.shape[0])
    if m_e:
        E_mu = ext.E[:, :n]
        mu0, *_ = np.linalg.lstsq(E_mu, ext.e, rcond=None)
        resid = E_mu @ mu0 - ext.e
        if ext.n_pairs == 0:
            scale = max(1.0, np.max(np.abs(ext.e), initial=0.0))
            if np.max(np.abs(resid), initial=0.0) > 1e-8 * scale:
                raise InfeasibleError("equality constraints are inconsistent")
        w0[:n] = mu0
        if ext.n_pairs:
            p0 = n + ext.n_eps_in
            w0[p0:p0 + ext.n_pairs] = np.maximum(-resid, 0.0)
            w0[p0 + ext.n_pairs:] = np.maximum(resid, 0.0)
    if ext.n_eps_in:
        viol = ext.F[:ext.m_in, :n] @ w0[:n] - ext.f[:ext.m_in]
        w0[n:n + ext.n_eps_in] = np.maximum(viol, 0.0)
    return w0


def _solve_extended(ext: _Extended, max_iter: int):
    w0 = _eq_start(ext)
    n = ext.n_mu
    # Slack nonnegativity rows already at their bound join the working set,
    # which skips the long walk of re-activating them one by one.
    active0 = [ext.m_in + j for j in range(ext.F.shape[0] - ext.m_in)
               if w0[n + j] == 0.0]
    return _active_set_min(ext, w0, active0, max_iter)


def _objective_value(qp: QpData, soft: Optional[SoftConfig], mu: np.ndarray,
                     eps: Optional[np.ndarray]) -> float:
    val = 0.5 * mu @ qp.Qmat @ mu + qp.q @ mu
    if soft is not None and eps is not None and eps.size:
        val -= soft.rho_lin * eps.sum() + soft.rho_quad * (eps @ eps)
    return float(val)


def solve(qp: QpData, z=None, pin: Optional[ActionPin] = None,
          soft: Optional[SoftConfig] = None, max_iter: Optional[int] = None) -> QpSolution:
    """Maximize the QP at input ``z``, optionally pinned and/or softened.

    Hard infeasible instances raise :class:`InfeasibleError`; softened
    instances are feasible by construction. The returned solution satisfies
    the optimality residual bound ``RESIDUAL_TOL``.
    """
    z = _check_z(qp, z)
    if pin is not None and pin.K.shape[1] != qp.n_mu:
        raise ValueError("pin matrix K has wrong column count")

    if max_iter is None:
        max_iter = 100 + 10 * (qp.n_mu + 2 * qp.m_in + qp.m_eq)

    if soft is not None:
        ext = _extended(qp, z, pin, soft)
        w, lam, nu, iters = _solve_extended(ext, max_iter)
        sol = _pack_solution(qp, z, pin, soft, ext, w, lam, nu, iters)
    else:
        sol = _solve_hard(qp, z, pin, max_iter)

    resid = kkt_residual(qp, z, sol)
    if resid > RESIDUAL_TOL:
        raise MaxIterationsError(
            f"converged point failed the optimality residual check ({resid:.3e})")
    return sol


def _solve_hard(qp: QpData, z, pin, max_iter: int) -> QpSolution:
    ext = _extended(qp, z, pin, None)
    w0 = _eq_start(ext)
    viol = np.max(ext.F @ w0 - ext.f, initial=0.0) if ext.F.shape[0] else 0.0
    if viol <= 1e-12:
        w, lam, nu, iters = _active_set_min(ext, w0, [], max_iter)
        return _pack_solution(qp, z, pin, None, ext, w, lam, nu, iters)

    # Feasibility unknown: solve with an escalating exact penalty. Zero slack
    # at the optimum certifies feasibility; a clean re-solve from that point
    # then removes the penalty-scaled roundoff.
    for rho in (1e5, 1e8, 1e11):
        aux = SoftConfig(rho_lin=rho, rho_quad=1.0)
        ext_s = _extended(qp, z, pin, aux)
        w, lam, nu, iters = _solve_extended(ext_s, max_iter)
        eps = w[ext_s.n_mu:]
        if np.max(eps, initial=0.0) <= ACTIVE_TOL:
            gap = ext.f - ext.F @ w[:ext.n_mu]
            active0 = list(np.flatnonzero(np.abs(gap) <= ACTIVE_TOL))
            w2, lam2, nu2, iters2 = _active_set_min(ext, w[:ext.n_mu],
                                                    active0, max_iter)
            return _pack_solution(qp, z, pin, None, ext, w2, lam2, nu2,
                                  iters + iters2)
    raise InfeasibleError("no point satisfies the hard constraint set")


def _pack_solution(qp, z, pin, soft, ext, w, lam, nu, iters) -> QpSolution:
    n = ext.n_mu
    mu = w[:n].copy()
    lam_in = lam[:ext.m_in].copy()
    slack = None
    eq_slack = None
    if soft is not None:
        slack = w[n:n + ext.n_eps_in].copy()
        if ext.n_pairs:
            p0 = n + ext.n_eps_in
            eq_slack = (w[p0:p0 + ext.n_pairs] - w[p0 + ext.n_pairs:]).copy()
    row_resid = ext.F[:ext.m_in] @ w - ext.f[:ext.m_in]
    active = tuple(int(i) for i in np.flatnonzero(np.abs(row_resid) <= ACTIVE_TOL))
    eps_all = w[n:] if soft is not None else None
    value = _objective_value(qp, soft, mu, eps_all)
    return QpSolution(
        mu_star=mu, lambda_star=lam_in, nu_star=nu.copy(), value=value,
        active_set=active, slack=slack, eq_slack=eq_slack, status="optimal",
        pin=pin, soft=soft, iterations=iters,
        _w=w.copy(), _lam=lam.copy(), _nu=nu.copy())


def _reconstruct_extended_point(qp: QpData, z, sol: QpSolution, ext: _Extended):
    """Rebuild the extended primal/dual point from the public solution fields.

    Used by the residual check so that it never trusts solver-internal
    state. Duals of the slack nonnegativity rows follow from stationarity
    in the slack coordinates.
    """
    n = ext.n_mu
    w = np.zeros(ext.Qx.shape[0])
    w[:n] = sol.mu_star
    lam = np.zeros(ext.F.shape[0])
    lam[:ext.m_in] = sol.lambda_star
    nu = np.asarray(sol.nu_star, dtype=float)
    if sol.soft is not None:
        rho_l, rho_q = ext.rho_lin, ext.rho_quad
        eps_in = np.zeros(ext.n_eps_in) if sol.slack is None else np.asarray(sol.slack, float)
        w[n:n + ext.n_eps_in] = eps_in
        lam[ext.m_in:ext.m_in + ext.n_eps_in] = rho_l + 2.0 * rho_q * eps_in - sol.lambda_star
        if ext.n_pairs:
            s = np.zeros(ext.n_pairs) if sol.eq_slack is None else np.asarray(sol.eq_slack, float)
            p = np.maximum(s, 0.0)
            m = np.maximum(-s, 0.0)
            p0 = n + ext.n_eps_in
            w[p0:p0 + ext.n_pairs] = p
            w[p0 + ext.n_pairs:] = m
            r0 = ext.m_in + ext.n_eps_in
            lam[r0:r0 + ext.n_pairs] = rho_l + 2.0 * rho_q * p + nu
            lam[r0 + ext.n_pairs:] = rho_l + 2.0 * rho_q * m - nu
    return w, lam, nu


def kkt_residual(qp: QpData, z, sol: QpSolution) -> float:
    """Max-norm optimality residual of a solution over all condition blocks.

    Covers stationarity, primal feasibility of both constraint kinds, dual
    nonnegativity and complementary slackness of the (possibly softened)
    problem the solution claims to solve. Zero for an exact optimum.
    """
    z = _check_z(qp, z)
    ext = _extended(qp, z, sol.pin, sol.soft)
    w, lam, nu = _reconstruct_extended_point(qp, z, sol, ext)

    stat = ext.Qx @ w + ext.qx - ext.F.T @ lam - ext.E.T @ nu
    r = np.max(np.abs(stat), initial=0.0)
    if ext.E.shape[0]:
        r = max(r, np.max(np.abs(ext.E @ w - ext.e), initial=0.0))
    if ext.F.shape[0]:
        gap = ext.F @ w - ext.f
        r = max(r, np.max(gap, initial=0.0))
        r = max(r, np.max(-lam, initial=0.0))
        r = max(r, np.max(np.abs(lam * gap), initial=0.0))
    return float(r)


def backward(qp: QpData, z, sol: QpSolution, upstream_mu=None,
             upstream_value: float = 0.0) -> QpGradients:
    """Gradients of ``upstream_mu' mu* + upstream_value * value``.

    Solves the transposed linearized optimality system once (with light
    damping, in the least-squares sense) for the solution-sensitivity part,
    and adds the optimal-value part through the stationarity identities:
    the value gradient with respect to ``q`` is ``mu*``, with respect to
    ``Qmat`` is ``mu* mu*'/2``, and with respect to each constraint
    right-hand side is the corresponding dual.
    """
    z = _check_z(qp, z)
    ext = _extended(qp, z, sol.pin, sol.soft)
    if sol._w is None:
        w, lam, nu = _reconstruct_extended_point(qp, z, sol, ext)
    else:
        w, lam, nu = sol._w, sol._lam, sol._nu
    n_w = ext.Qx.shape[0]
    m_f, m_e = ext.F.shape[0], ext.E.shape[0]
    n = ext.n_mu

    if upstream_mu is None:
        upstream_mu = np.zeros(n)
    upstream_mu = _vec(upstream_mu, n, "upstream_mu")
    uv = float(upstream_value)

    mu = w[:n]
    lam_in = lam[:ext.m_in]
    nu_eq = nu[:ext.m_eq]

    g_mu = np.zeros(n)
    t_in = np.zeros(ext.m_in)
    g_nu_eq = np.zeros(ext.m_eq)
    if np.any(upstream_mu):
        M = np.zeros((n_w + m_f + m_e, n_w + m_f + m_e))
        M[:n_w, :n_w] = ext.Qx
        M[:n_w, n_w:n_w + m_f] = -ext.F.T
        M[:n_w, n_w + m_f:] = -ext.E.T
        M[n_w:n_w + m_f, :n_w] = lam[:, None] * ext.F
        M[n_w:n_w + m_f, n_w:n_w + m_f] = np.diag(ext.F @ w - ext.f)
        M[n_w + m_f:, :n_w] = ext.E

        rhs = np.zeros(n_w + m_f + m_e)
        rhs[:n] = upstream_mu
        tol = 1e-6 * max(1.0, np.max(np.abs(rhs), initial=0.0))
        g = None
        try:
            g = np.linalg.solve(M.T, rhs)
            if np.max(np.abs(M.T @ g - rhs), initial=0.0) > tol:
                g = None
        except np.linalg.LinAlgError:
            g = None
        if g is None:
            # Degenerate system: damped least-squares picks the minimum-norm
            # sensitivity consistent with the linearized conditions.
            A = M @ M.T
            A[np.diag_indices_from(A)] += _KKT_DAMPING
            try:
                g = np.linalg.solve(A, M @ rhs)
            except np.linalg.LinAlgError:
                g = np.linalg.lstsq(A, M @ rhs, rcond=None)[0]
            resid = np.max(np.abs(M.T @ g - rhs), initial=0.0)
            if resid > tol:
                raise SingularKktError(
                    f"damped sensitivity solve left residual {resid:.3e}; "
                    "the solution looks degenerate")
        g_w = g[:n_w]
        g_lam = g[n_w:n_w + m_f]
        g_nu = g[n_w + m_f:]
        g_mu = g_w[:n]
        t_in = lam_in * g_lam[:ext.m_in]
        g_nu_eq = g_nu[:ext.m_eq]

    d_Q = -0.5 * (np.outer(g_mu, mu) + np.outer(mu, g_mu)) + uv * 0.5 * np.outer(mu, mu)
    d_q = -g_mu + uv * mu
    d_D = (np.outer(lam_in, g_mu) - np.outer(t_in, mu) - uv * np.outer(lam_in, mu))
    d_d = t_in + uv * lam_in
    d_C = -np.outer(t_in, z) - uv * np.outer(lam_in, z)
    d_B = (np.outer(nu_eq, g_mu) - np.outer(g_nu_eq, mu) - uv * np.outer(nu_eq, mu))
    d_b = g_nu_eq + uv * nu_eq
    d_A = -np.outer(g_nu_eq, z) - uv * np.outer(nu_eq, z)
    d_z = (-qp.Cineq.T @ (t_in + uv * lam_in) - qp.Aeq.T @ (g_nu_eq + uv * nu_eq))

    return QpGradients(d_Qmat=d_Q, d_q=d_q, d_Aeq=d_A, d_Beq=d_B, d_beq=d_b,
                       d_Cineq=d_C, d_Dineq=d_D, d_dineq=d_d, d_z=d_z)
