"""Shared test utilities: random problem generators and independent oracles.

The oracles here deliberately avoid the library's solution paths: the
enumeration solver tries every active subset, and the finite-difference
checker re-solves perturbed instances.
"""

from __future__ import annotations

import numpy as np

from qprl.diffqp import ActionPin, QpData, SoftConfig, solve


def random_qp(rng, n_max=6, m_in_max=8, m_eq_max=3, n_z_max=3):
    """Random feasible QP with a strictly feasible interior point."""
    n = int(rng.integers(1, n_max + 1))
    m_eq = int(rng.integers(0, min(m_eq_max, max(n - 1, 0)) + 1))
    m_in = int(rng.integers(0, m_in_max + 1))
    n_z = int(rng.integers(0, n_z_max + 1))

    M = rng.normal(size=(n, n))
    Qmat = -(M.T @ M + 0.5 * np.eye(n))
    q = rng.normal(size=n)
    z = rng.normal(size=n_z)
    mu0 = rng.normal(size=n)

    Aeq = rng.normal(size=(m_eq, n_z))
    Beq = rng.normal(size=(m_eq, n))
    beq = Aeq @ z + Beq @ mu0
    Cineq = rng.normal(size=(m_in, n_z))
    Dineq = rng.normal(size=(m_in, n))
    dineq = Cineq @ z + Dineq @ mu0 + 0.1 + rng.uniform(0.0, 1.0, size=m_in)

    qp = QpData(Qmat=Qmat, q=q, Aeq=Aeq, Beq=Beq, beq=beq,
                Cineq=Cineq, Dineq=Dineq, dineq=dineq)
    return qp, z


def enumerate_solve(qp: QpData, z=None, pin: ActionPin | None = None):
    """Reference maximizer found by trying every active subset of rows.

    Returns ``(mu, value)`` of the best KKT-consistent candidate, or
    ``None`` when no subset yields a feasible point (infeasible problem).
    """
    z = np.zeros(qp.n_z) if z is None else np.asarray(z, dtype=float)
    E0 = qp.Beq
    e0 = qp.beq - qp.Aeq @ z
    if pin is not None:
        E0 = np.vstack([E0, pin.K])
        e0 = np.concatenate([e0, pin.u])
    d_eff = qp.dineq - qp.Cineq @ z
    n = qp.n_mu
    m_in = qp.m_in
    m_e0 = E0.shape[0]

    best = None
    for mask in range(1 << m_in):
        subset = [i for i in range(m_in) if mask >> i & 1]
        E = np.vstack([E0, qp.Dineq[subset]]) if subset else E0
        e = np.concatenate([e0, d_eff[subset]]) if subset else e0
        k = E.shape[0]
        if k > n:
            continue
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = qp.Qmat
        kkt[:n, n:] = -E.T
        kkt[n:, :n] = E
        rhs = np.concatenate([-qp.q, e])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            continue
        mu = sol[:n]
        lam_sub = sol[n + m_e0:]
        if lam_sub.size and lam_sub.min() < -1e-9:
            continue
        if m_in and np.max(qp.Dineq @ mu - d_eff) > 1e-9:
            continue
        if m_e0 and np.max(np.abs(E0 @ mu - e0)) > 1e-9:
            continue
        value = 0.5 * mu @ qp.Qmat @ mu + qp.q @ mu
        if best is None or value > best[1] + 1e-12:
            best = (mu, value)
    return best


def _loss(qp, z, pin, soft, upstream_mu, upstream_value):
    sol = solve(qp, z, pin=pin, soft=soft)
    out = upstream_value * sol.value
    if upstream_mu is not None:
        out += float(upstream_mu @ sol.mu_star)
    return out


def fd_gradients(qp: QpData, z, pin, soft, upstream_mu, upstream_value, h=1e-3):
    """Central finite differences of the backward functional, block by block.

    Symmetric off-diagonal entries of ``Qmat`` are perturbed as a pair, so
    the result compares against twice the symmetrized gradient there.
    """
    z = np.zeros(qp.n_z) if z is None else np.asarray(z, dtype=float)

    def resolve(**replace):
        data = dict(Qmat=qp.Qmat, q=qp.q, Aeq=qp.Aeq, Beq=qp.Beq, beq=qp.beq,
                    Cineq=qp.Cineq, Dineq=qp.Dineq, dineq=qp.dineq)
        zz = replace.pop("z", z)
        data.update(replace)
        return _loss(QpData(**data), zz, pin, soft, upstream_mu, upstream_value)

    out = {}
    gQ = np.zeros_like(qp.Qmat)
    n = qp.n_mu
    for i in range(n):
        for j in range(i, n):
            dQ = np.zeros_like(qp.Qmat)
            dQ[i, j] += h
            dQ[j, i] += h if i != j else 0.0
            gij = (resolve(Qmat=qp.Qmat + dQ) - resolve(Qmat=qp.Qmat - dQ)) / (2 * h)
            gQ[i, j] = gij
            gQ[j, i] = gij
    out["d_Qmat"] = gQ

    for name in ("q", "beq", "dineq", "z"):
        base = z if name == "z" else getattr(qp, name)
        g = np.zeros_like(base)
        for i in range(base.size):
            d = np.zeros_like(base)
            d[i] = h
            g[i] = (resolve(**{name: base + d}) - resolve(**{name: base - d})) / (2 * h)
        out["d_" + name] = g

    for name in ("Aeq", "Beq", "Cineq", "Dineq"):
        base = getattr(qp, name)
        g = np.zeros_like(base)
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                d = np.zeros_like(base)
                d[i, j] = h
                g[i, j] = (resolve(**{name: base + d}) - resolve(**{name: base - d})) / (2 * h)
        out["d_" + name] = g
    return out


def fd_compare(grads, fd, rtol=1e-4, afloor=1e-7):
    """Worst relative error between analytic and finite-difference blocks.

    ``Qmat`` finite differences measured over symmetric pairs equal twice
    the off-diagonal symmetrized gradient; scale accordingly before the
    comparison.
    """
    worst = 0.0
    worst_name = ""
    for name, f in fd.items():
        a = np.asarray(getattr(grads, name), dtype=float)
        if name == "d_Qmat":
            scale = 2.0 - np.eye(a.shape[0])
            a = a * scale
        err = np.abs(a - f)
        denom = np.maximum(np.abs(f), afloor / rtol)
        rel = (err / denom).max() if err.size else 0.0
        if rel > worst:
            worst = rel
            worst_name = name
    return worst, worst_name


def fd_compare_best(qp, z, pin, soft, upstream_mu, upstream_value, grads,
                    steps=(1e-3, 1e-4), rtol=1e-4, afloor=1e-7):
    """Per-block best error over several difference steps.

    Central differences trade truncation (large steps) against re-solve
    roundoff (small steps); a derivative is accepted when either step
    confirms it.
    """
    results = [fd_gradients(qp, z, pin, soft, upstream_mu, upstream_value, h=h)
               for h in steps]
    worst = 0.0
    worst_name = ""
    for name in results[0]:
        best = np.inf
        for fd in results:
            rel, _ = fd_compare(grads, {name: fd[name]}, rtol=rtol, afloor=afloor)
            best = min(best, rel)
        if best > worst:
            worst = best
            worst_name = name
    return worst, worst_name


def solve_stable(rng, make, min_margin=3e-3):
    """Draw instances until one has a strictly complementary solution.

    ``make`` returns ``(qp, z, pin, soft)``; the accepted instance keeps
    every active dual and every inactive gap above ``min_margin`` so small
    parameter perturbations cannot flip the active set.
    """
    for _ in range(200):
        qp, z, pin, soft = make(rng)
        try:
            sol = solve(qp, z, pin=pin, soft=soft)
        except Exception:
            continue
        lam = sol.lambda_star
        active = np.array(sol.active_set, dtype=int)
        ok = True
        if lam.size:
            mask = np.zeros(lam.size, dtype=bool)
            mask[active] = True
            if np.any(mask) and lam[mask].min() < min_margin:
                ok = False
            d_eff = qp.dineq - qp.Cineq @ (np.zeros(qp.n_z) if z is None else z)
            gap = d_eff - qp.Dineq @ sol.mu_star
            if sol.slack is not None:
                gap = gap + sol.slack
            if np.any(~mask) and gap[~mask].min() < min_margin:
                ok = False
            if sol.slack is not None and np.any(
                    (sol.slack > 0) & (sol.slack < min_margin)):
                ok = False
        if ok:
            return qp, z, pin, soft, sol
    raise RuntimeError("could not draw a strictly complementary instance")
