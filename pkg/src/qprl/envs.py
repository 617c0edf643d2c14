"""Benchmark environments: an unstable box-constrained linear system and a
torque-limited pendulum.

Both are pure transition functions: an environment object holds constants
only, and ``step(state, u)`` returns ``(next_state, reward, done)`` without
touching any internal state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _default_linear_a():
    return np.array([[1.53, 0.25], [-0.56, -0.52]])


def _default_linear_b():
    return np.array([[1.23], [-0.96]])


def wrap_angle(theta: float) -> float:
    """Wrap to the half-open interval (-pi, pi]."""
    w = (theta + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return float(w)


@dataclass
class LinearEnv:
    """x+ = A x + B u with box constraints and inner/outer termination.

    Episodes start uniformly inside ``init_bound`` and end when the state
    enters the inner box (success) or leaves the outer box (failure). The
    stage reward is ``-(||x||^2 + ||u||^2)``.
    """

    A: np.ndarray = field(default_factory=_default_linear_a)
    B: np.ndarray = field(default_factory=_default_linear_b)
    state_bound: float = 4.0
    input_bound: float = 1.0
    init_bound: float = 2.0
    inner_bound: float = 0.1

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(self.A.shape[0], -1)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def m_u(self) -> int:
        return self.B.shape[1]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.init_bound, self.init_bound, size=self.n_x)

    def is_terminal(self, x) -> bool:
        ax = np.max(np.abs(x))
        return bool(ax <= self.inner_bound or ax > self.state_bound)

    def truncated_exit(self, x) -> bool:
        """Episode end that cuts off an ongoing trajectory rather than
        completing it: leaving the outer box. Value bootstraps should treat
        such states as non-terminal, otherwise ending badly looks free."""
        return bool(np.max(np.abs(x)) > self.state_bound)

    def stage_reward(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float).reshape(-1)
        return float(-(x @ x + u @ u))

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.clip(np.asarray(u, dtype=float).reshape(-1),
                    -self.input_bound, self.input_bound)
        reward = self.stage_reward(x, u)
        x_next = self.A @ x + self.B @ u
        return x_next, reward, self.is_terminal(x_next)


@dataclass
class PendulumEnv:
    """Inverted pendulum with the angle measured from upright.

    Update order: the angle advances with the pre-update rate, then the
    rate absorbs gravity and torque. The rate is clipped to
    ``[-rate_bound, rate_bound]``, torque to ``[-input_bound, input_bound]``
    and the angle wraps to (-pi, pi]. There is no terminal state; episodes
    end on the step limit only.
    """

    g: float = 10.0
    m: float = 1.0
    l: float = 1.0
    dt: float = 0.05
    rate_bound: float = 8.0
    input_bound: float = 10.0

    n_x = 2
    m_u = 1

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        theta = -rng.uniform(-np.pi, np.pi)  # uniform over (-pi, pi]
        rate = rng.uniform(-1.0, 1.0)
        return np.array([theta, rate])

    def is_terminal(self, x) -> bool:
        return False

    def truncated_exit(self, x) -> bool:
        return False

    def stage_reward(self, x, u) -> float:
        theta, rate = float(x[0]), float(x[1])
        u0 = float(np.asarray(u).reshape(-1)[0])
        return -(theta ** 2 + 0.1 * rate ** 2 + 0.001 * u0 ** 2)

    def step(self, x, u):
        theta, rate = float(x[0]), float(x[1])
        u0 = float(np.clip(np.asarray(u, dtype=float).reshape(-1)[0],
                           -self.input_bound, self.input_bound))
        reward = self.stage_reward(x, u0)
        theta_next = wrap_angle(theta + rate * self.dt)
        # sin(theta + pi) = -sin(theta): gravity pulls away from upright.
        rate_next = rate + (3.0 * self.g / (2.0 * self.l)) * self.dt * np.sin(theta) \
            + (3.0 / (self.m * self.l ** 2)) * self.dt * u0
        rate_next = float(np.clip(rate_next, -self.rate_bound, self.rate_bound))
        return np.array([theta_next, rate_next]), reward, False

    def energy(self, x) -> float:
        """Rod energy about the pivot; conserved by the continuous flow at u=0."""
        theta, rate = float(x[0]), float(x[1])
        inertia = self.m * self.l ** 2 / 3.0
        return 0.5 * inertia * rate ** 2 + 0.5 * self.m * self.g * self.l * np.cos(theta)


def make_env(name: str):
    if name == "linear":
        return LinearEnv()
    if name == "pendulum":
        return PendulumEnv()
    raise ValueError(f"unknown environment '{name}'")
