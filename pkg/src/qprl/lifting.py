"""State liftings: small feedforward nets mapping the state to the QP input,
plus the two initialization routes used by the experiments (least-squares
system identification for the linear plant, dictionary regression for the
pendulum)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .baseline import solve_dare
from .diffqp import SoftConfig
from .errors import RankDeficientError

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(self.W.shape[0])
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation '{self.activation}'")


@dataclass
class LiftingNet:
    """Feedforward lifting with tanh hidden layers and a linear output."""

    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("lifting needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValueError("layer dimensions do not chain")
        if self.layers[-1].activation != "identity":
            raise ValueError("output layer must be linear")

    @property
    def n_x(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_z(self) -> int:
        return self.layers[-1].W.shape[0]

    def copy(self) -> "LiftingNet":
        return LiftingNet([Layer(l.W.copy(), l.b.copy(), l.activation)
                           for l in self.layers])


def identity_net(n: int) -> LiftingNet:
    return LiftingNet([Layer(np.eye(n), np.zeros(n), "identity")])


def mlp_net(rng: np.random.Generator, n_x: int, n_z: int,
            hidden: Sequence[int] = (16, 16),
            input_scale: Optional[Sequence[float]] = None) -> LiftingNet:
    """Random tanh MLP; first-layer weights are scaled per input coordinate
    so the hidden units start in their responsive range."""
    sizes = [n_x, *hidden, n_z]
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.normal(size=(b, a)) / np.sqrt(a)
        if i == 0 and input_scale is not None:
            W = W / np.asarray(input_scale, dtype=float)[None, :]
        act = "tanh" if i < len(sizes) - 2 else "identity"
        layers.append(Layer(W, np.zeros(b), act))
    return LiftingNet(layers)


def _forward(net: LiftingNet, X: np.ndarray):
    H = X
    acts = [H]
    for layer in net.layers:
        Z = H @ layer.W.T + layer.b
        H = np.tanh(Z) if layer.activation == "tanh" else Z
        acts.append(H)
    return H, acts


def lift(net: LiftingNet, x) -> np.ndarray:
    """Evaluate the lifting at one state."""
    x = np.asarray(x, dtype=float).reshape(net.n_x)
    z, _ = _forward(net, x[None, :])
    return z[0]


def lift_batch(net: LiftingNet, X) -> np.ndarray:
    z, _ = _forward(net, np.asarray(X, dtype=float))
    return z


def lift_backward(net: LiftingNet, x, upstream_z) -> Tuple[list, np.ndarray]:
    """Reverse-mode gradients of ``upstream_z' lift(x)``.

    Returns ``(per-layer (dW, db) list, d_x)``.
    """
    x = np.asarray(x, dtype=float).reshape(net.n_x)
    upstream_z = np.asarray(upstream_z, dtype=float).reshape(net.n_z)
    _, acts = _forward(net, x[None, :])
    delta = upstream_z.copy()
    grads = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        h_prev = acts[i][0]
        if layer.activation == "tanh":
            delta = delta * (1.0 - acts[i + 1][0] ** 2)
        grads[i] = (np.outer(delta, h_prev), delta.copy())
        delta = layer.W.T @ delta
    return grads, delta


@dataclass
class SysIdModel:
    """Least-squares one-step model x+ = Ahat x + Bhat u."""

    Ahat: np.ndarray
    Bhat: np.ndarray
    residual_norm: float


def sysid_least_squares(transitions) -> SysIdModel:
    """Fit (Ahat, Bhat) to observed transitions by least squares.

    ``transitions`` is a sequence of ``(x, u, x_next)``. Raises
    :class:`RankDeficientError` when the regressors do not span the
    combined state-input space.
    """
    transitions = list(transitions)
    if not transitions:
        raise ValueError("no transitions given")
    X = np.array([np.asarray(t[0], dtype=float).reshape(-1) for t in transitions])
    U = np.array([np.asarray(t[1], dtype=float).reshape(-1) for t in transitions])
    Xn = np.array([np.asarray(t[2], dtype=float).reshape(-1) for t in transitions])
    n_x, m_u = X.shape[1], U.shape[1]
    if len(transitions) < n_x + m_u:
        raise RankDeficientError(
            f"need at least {n_x + m_u} transitions, got {len(transitions)}")
    Phi = np.hstack([X, U])
    if np.linalg.matrix_rank(Phi) < n_x + m_u:
        raise RankDeficientError("transition data does not excite all directions")
    theta, *_ = np.linalg.lstsq(Phi, Xn, rcond=None)
    resid = Phi @ theta - Xn
    return SysIdModel(Ahat=theta[:n_x].T.copy(), Bhat=theta[n_x:].T.copy(),
                      residual_norm=float(np.linalg.norm(resid)))


@dataclass
class Dictionary:
    """Ordered scalar feature functions of the state."""

    names: Tuple[str, ...]
    fn: Callable[[np.ndarray], np.ndarray]

    @property
    def n_z(self) -> int:
        return len(self.names)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = self.fn(np.atleast_2d(X))
        return out[0] if single else out


def pendulum_dictionary() -> Dictionary:
    def feats(X):
        th, rate = X[:, 0], X[:, 1]
        return np.stack([th, rate, np.sin(th), np.cos(th), rate * np.sin(th)],
                        axis=1)

    return Dictionary(names=("theta", "rate", "sin_theta", "cos_theta",
                             "rate_sin_theta"), fn=feats)


def identity_dictionary(n: int) -> Dictionary:
    return Dictionary(names=tuple(f"x{i}" for i in range(n)),
                      fn=lambda X: X.copy())


@dataclass
class LinearPredictor:
    """One-step linear model in lifted coordinates: z+ = Kz z + Bz u."""

    Kz: np.ndarray
    Bz: np.ndarray
    residual_norm: float


def _net_jacobian(net: LiftingNet, X: np.ndarray):
    """Batched Jacobian of the outputs with respect to every weight/bias."""
    out, acts = _forward(net, X)
    N, K = out.shape
    R = np.tile(np.eye(K)[None], (N, 1, 1))  # d out / d h_i, walked backwards
    blocks = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        S = R * (1.0 - acts[i + 1] ** 2)[:, None, :] if layer.activation == "tanh" else R
        JW = np.einsum("nkr,nc->nkrc", S, acts[i]).reshape(N, K, -1)
        blocks[i] = np.concatenate([JW, S], axis=2)
        R = np.einsum("nkr,rc->nkc", S, layer.W)
    return out, np.concatenate(blocks, axis=2)


def _net_get_params(net: LiftingNet) -> np.ndarray:
    return np.concatenate([np.concatenate([l.W.ravel(), l.b]) for l in net.layers])


def _net_set_params(net: LiftingNet, v: np.ndarray) -> None:
    k = 0
    for layer in net.layers:
        nW = layer.W.size
        layer.W = v[k:k + nW].reshape(layer.W.shape).copy()
        k += nW
        layer.b = v[k:k + layer.b.size].copy()
        k += layer.b.size


def fit_net_least_squares(net: LiftingNet, X: np.ndarray, Y: np.ndarray,
                          max_iter: int = 150, tol: float = 1e-9) -> float:
    """Damped Gauss-Newton regression of the net onto targets ``Y``.

    Deterministic full-batch fit; mutates ``net`` in place and returns the
    final mean squared error.
    """
    v = _net_get_params(net)
    out, _ = _forward(net, X)
    mse = float(np.mean((out - Y) ** 2))
    lam = 1e-2
    for _ in range(max_iter):
        _net_set_params(net, v)
        out, J = _net_jacobian(net, X)
        r = (out - Y).reshape(-1)
        Jf = J.reshape(r.size, -1)
        JtJ = Jf.T @ Jf
        Jtr = Jf.T @ r
        diag = np.maximum(np.diag(JtJ), 1e-12)
        improved = False
        for _ in range(15):
            A = JtJ + lam * np.diag(diag)
            try:
                step = np.linalg.solve(A, -Jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            v_new = v + step
            _net_set_params(net, v_new)
            out2, _ = _forward(net, X)
            mse2 = float(np.mean((out2 - Y) ** 2))
            if mse2 < mse:
                v, mse = v_new, mse2
                lam = max(lam * 0.3, 1e-13)
                improved = True
                break
            lam *= 10.0
        if not improved or mse < tol:
            break
    _net_set_params(net, v)
    return mse


def edmd_pretrain(dictionary: Dictionary, trajectories, net: LiftingNet,
                  max_iter: int = 150) -> Tuple[LiftingNet, LinearPredictor]:
    """Regress the net onto dictionary features and fit a lifted predictor.

    ``trajectories`` is a list of ``(X, U)`` pairs with ``X`` holding T+1
    states and ``U`` the T inputs between them. The returned predictor is a
    least-squares one-step model on the dictionary features, used to seed
    the QP structure and as a diagnostic.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories given")
    states = []
    Z, Zn, U = [], [], []
    for X, Uin in trajectories:
        X = np.asarray(X, dtype=float)
        states.append(X)
        if Uin is None or len(np.atleast_1d(Uin)) == 0:
            continue
        Uin = np.asarray(Uin, dtype=float).reshape(X.shape[0] - 1, -1)
        feats = dictionary(X)
        Z.append(feats[:-1])
        Zn.append(feats[1:])
        U.append(Uin)
    states = np.vstack(states)
    targets = dictionary(states)

    net = net.copy()
    mse = fit_net_least_squares(net, states, targets, max_iter=max_iter)

    if not Z:
        raise RankDeficientError("no transition pairs to fit the predictor")
    Z = np.vstack(Z)
    Zn = np.vstack(Zn)
    U = np.vstack(U)
    Phi = np.hstack([Z, U])
    if np.linalg.matrix_rank(Phi) < Phi.shape[1]:
        raise RankDeficientError("lifted regression is rank deficient")
    theta, *_ = np.linalg.lstsq(Phi, Zn, rcond=None)
    resid = Phi @ theta - Zn
    predictor = LinearPredictor(Kz=theta[:Z.shape[1]].T.copy(),
                                Bz=theta[Z.shape[1]:].T.copy(),
                                residual_norm=float(np.linalg.norm(resid)))
    predictor.fit_error = mse
    return net, predictor


def _factor_from_target(target: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Matrix M with M'M + floor*I equal to the positive definite target."""
    shifted = target - floor * np.eye(target.shape[0])
    return np.linalg.cholesky(shifted).T


def _noise_raw(sigma0: float, m_u: int, sigma_min: float) -> np.ndarray:
    """Lower-triangular raw noise parameter whose effective diagonal is sigma0."""
    inner = max(sigma0 - sigma_min, 1e-8)
    raw = np.zeros((m_u, m_u))
    np.fill_diagonal(raw, np.log(np.expm1(inner)))
    return raw


def build_mpc_lifting(model: SysIdModel, horizon: int, *,
                      state_bound: float = 4.0, input_bound: float = 1.0,
                      Qw: Optional[np.ndarray] = None,
                      Rw: Optional[np.ndarray] = None,
                      terminal: object = None,
                      sigma0: float = 0.1, sigma_min: float = 1e-3,
                      soft: Optional[SoftConfig] = None):
    """Parameter set whose QP is a horizon-N regulator on the fitted model.

    The decision vector stacks predicted states ``s_1..s_N`` then inputs
    ``u_0..u_{N-1}``; the lifting is the identity, the equalities encode the
    model rollout, the objective blocks carry the stage cost (terminal
    weight defaulting to the stage weight, ``"riccati"`` for the
    unconstrained tail), and the reconstruction picks out ``u_0``.
    """
    from .unified import UnifiedParams

    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    A = np.asarray(model.Ahat, dtype=float)
    B = np.asarray(model.Bhat, dtype=float).reshape(A.shape[0], -1)
    n, m = A.shape[0], B.shape[1]
    N = horizon
    Qw = np.eye(n) if Qw is None else np.asarray(Qw, dtype=float)
    Rw = np.eye(m) if Rw is None else np.asarray(Rw, dtype=float)
    if terminal is None:
        P = Qw.copy()
    elif isinstance(terminal, str):
        if terminal != "riccati":
            raise ValueError("terminal must be None, 'riccati' or a matrix")
        P = solve_dare(A, B, Qw, Rw)
    else:
        P = np.asarray(terminal, dtype=float)

    n_mu = N * n + N * m

    def s_cols(t):  # t in 1..N
        return slice((t - 1) * n, t * n)

    def u_cols(t):  # t in 0..N-1
        return slice(N * n + t * m, N * n + (t + 1) * m)

    target = np.zeros((n_mu, n_mu))
    for t in range(1, N):
        target[s_cols(t), s_cols(t)] = 2.0 * Qw
    target[s_cols(N), s_cols(N)] = 2.0 * P
    for t in range(N):
        target[u_cols(t), u_cols(t)] = 2.0 * Rw
    Mfactor = _factor_from_target(target)

    Aeq = np.zeros((N * n, n))
    Beq = np.zeros((N * n, n_mu))
    Aeq[0:n] = -A
    Beq[0:n, s_cols(1)] = np.eye(n)
    Beq[0:n, u_cols(0)] = -B
    for t in range(1, N):
        r = slice(t * n, (t + 1) * n)
        Beq[r, s_cols(t + 1)] = np.eye(n)
        Beq[r, s_cols(t)] = -A
        Beq[r, u_cols(t)] = -B
    beq = np.zeros(N * n)

    rows, rhs = [], []
    for t in range(1, N + 1):
        sel = np.zeros((n, n_mu))
        sel[:, s_cols(t)] = np.eye(n)
        rows += [sel, -sel]
        rhs += [np.full(n, state_bound)] * 2
    for t in range(N):
        sel = np.zeros((m, n_mu))
        sel[:, u_cols(t)] = np.eye(m)
        rows += [sel, -sel]
        rhs += [np.full(m, input_bound)] * 2
    Dineq = np.vstack(rows)
    dineq = np.concatenate(rhs)
    Cineq = np.zeros((Dineq.shape[0], n))

    K = np.zeros((m, n_mu))
    K[:, u_cols(0)] = np.eye(m)

    return UnifiedParams(
        Mfactor=Mfactor, q=np.zeros(n_mu), Aeq=Aeq, Beq=Beq, beq=beq,
        Cineq=Cineq, Dineq=Dineq, dineq=dineq, beta=identity_net(n), K=K,
        Lraw=_noise_raw(sigma0, m, sigma_min), sigma_min=sigma_min,
        soft=soft if soft is not None else SoftConfig())


def build_koopman_structure(predictor: LinearPredictor, net: LiftingNet,
                            horizon: int, *, stage_weights: Sequence[float],
                            input_weight: float, terminal_scale: float = 3.0,
                            weight_floor: float = 1e-3,
                            rate_index: Optional[int] = 1,
                            rate_bound: float = 8.0, input_bound: float = 10.0,
                            sigma0: float = 1.0, sigma_min: float = 1e-3,
                            soft: Optional[SoftConfig] = None):
    """Parameter set planning ``horizon`` steps ahead in lifted coordinates.

    The decision vector stacks predicted lifted states ``zeta_1..zeta_H``
    then inputs; equalities roll the fitted lifted model forward, the
    objective carries the stage cost expressed on the dictionary features
    (scaled up on the final block), and boxes bound the inputs and the
    predicted coordinate at ``rate_index``.
    """
    from .unified import UnifiedParams

    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    Kz = np.asarray(predictor.Kz, dtype=float)
    Bz = np.asarray(predictor.Bz, dtype=float)
    n_z = Kz.shape[0]
    m = Bz.shape[1]
    H = horizon
    n_mu = H * n_z + H * m

    W = np.diag(np.maximum(np.asarray(stage_weights, dtype=float), weight_floor))
    R = np.atleast_2d(max(input_weight, weight_floor))
    if R.shape != (m, m):
        R = max(input_weight, weight_floor) * np.eye(m)

    def zcols(t):  # t in 1..H
        return slice((t - 1) * n_z, t * n_z)

    def ucols(t):  # t in 0..H-1
        return slice(H * n_z + t * m, H * n_z + (t + 1) * m)

    target = np.zeros((n_mu, n_mu))
    for t in range(1, H):
        target[zcols(t), zcols(t)] = 2.0 * W
    target[zcols(H), zcols(H)] = 2.0 * terminal_scale * W
    for t in range(H):
        target[ucols(t), ucols(t)] = 2.0 * R
    Mfactor = _factor_from_target(target)

    Aeq = np.zeros((H * n_z, n_z))
    Beq = np.zeros((H * n_z, n_mu))
    Aeq[0:n_z] = -Kz
    Beq[0:n_z, zcols(1)] = np.eye(n_z)
    Beq[0:n_z, ucols(0)] = -Bz
    for t in range(1, H):
        r = slice(t * n_z, (t + 1) * n_z)
        Beq[r, zcols(t + 1)] = np.eye(n_z)
        Beq[r, zcols(t)] = -Kz
        Beq[r, ucols(t)] = -Bz
    beq = np.zeros(H * n_z)

    rows, rhs = [], []
    for t in range(H):
        sel = np.zeros((m, n_mu))
        sel[:, ucols(t)] = np.eye(m)
        rows += [sel, -sel]
        rhs += [np.full(m, input_bound)] * 2
    if rate_index is not None:
        for t in range(1, H + 1):
            sel = np.zeros((1, n_mu))
            sel[0, (t - 1) * n_z + rate_index] = 1.0
            rows += [sel, -sel]
            rhs += [np.array([rate_bound])] * 2
    Dineq = np.vstack(rows)
    dineq = np.concatenate(rhs)
    Cineq = np.zeros((Dineq.shape[0], n_z))

    K = np.zeros((m, n_mu))
    K[:, ucols(0)] = np.eye(m)

    return UnifiedParams(
        Mfactor=Mfactor, q=np.zeros(n_mu), Aeq=Aeq, Beq=Beq, beq=beq,
        Cineq=Cineq, Dineq=Dineq, dineq=dineq, beta=net.copy(), K=K,
        Lraw=_noise_raw(sigma0, m, sigma_min), sigma_min=sigma_min,
        soft=soft if soft is not None else SoftConfig())
