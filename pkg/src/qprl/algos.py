"""Training algorithms over the shared parameter set: temporal-difference
Q-learning with a replay buffer, advantage actor-critic with per-episode
accumulation, plain policy gradient, and the soft target blend.

All algorithms consume and produce :class:`~qprl.unified.UnifiedParams`
unchanged in shape, so they can be chained on one parameter set without any
conversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .unified import (Layer, LiftingNet, PolicySample, ThetaGrad,
                      UnifiedParams, action_from_noise, apply_update,
                      grad_log_prob, grad_q_value, grad_value, policy,
                      q_value, sample_action, value)

_ARRAY_FIELDS = ("Mfactor", "q", "Aeq", "Beq", "beq", "Cineq", "Dineq",
                 "dineq", "Lraw")


@dataclass
class Transition:
    x: np.ndarray
    u: np.ndarray
    reward: float
    x_next: np.ndarray
    done: bool
    epsilon: Optional[np.ndarray] = None


@dataclass
class TrainConfig:
    gamma: float = 1.0
    alpha_actor: float = 1e-4
    alpha_critic: float = 1e-4
    tau_soft: float = 0.05
    t_max: int = 200
    episodes: int = 100
    explore_sigma: float = 0.2
    batch: int = 16
    seed: int = 0
    update_every: int = 1
    buffer_capacity: int = 10_000
    clip_norm: float = 10.0
    # Subtract the episode-mean return error from both accumulations. The
    # QP value has no constant-offset direction, so the systematic gap
    # between noisy-rollout returns and the deterministic optimum would
    # otherwise drag the maximizer itself.
    center_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.tau_soft <= 1.0:
            raise ValueError("tau_soft must lie in (0, 1]")
        for name in ("alpha_actor", "alpha_critic", "explore_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("t_max", "episodes", "batch", "update_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class EpisodeStats:
    episode_return: float
    steps: int
    critic_loss: float
    td_mean_sq: float


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform resampling."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._items: List[Transition] = []

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        self._items.append(tr)
        if len(self._items) > self.capacity:
            self._items.pop(0)

    def sample(self, rng: np.random.Generator, k: int) -> List[Transition]:
        idx = rng.integers(0, len(self._items), size=k)
        return [self._items[i] for i in idx]


def returns_to_go(rewards: Sequence[float], bootstrap: float,
                  gamma: float) -> List[float]:
    """Reverse-accumulated returns: R_i = r_i + gamma * R_{i+1}."""
    out: List[float] = []
    acc = float(bootstrap)
    for r in reversed(list(rewards)):
        acc = float(r) + gamma * acc
        out.append(acc)
    out.reverse()
    return out


def soft_update(target_theta: UnifiedParams, theta: UnifiedParams,
                tau_soft: float) -> UnifiedParams:
    """Blend every trainable field of the target toward the live parameters."""
    if not np.array_equal(target_theta.K, theta.K):
        raise ValueError("parameter sets disagree on the fixed reconstruction")
    new = theta.copy()
    for name in _ARRAY_FIELDS:
        blended = (tau_soft * getattr(theta, name)
                   + (1.0 - tau_soft) * getattr(target_theta, name))
        setattr(new, name, blended)
    new.beta = LiftingNet([
        Layer(tau_soft * lt.W + (1.0 - tau_soft) * lg.W,
              tau_soft * lt.b + (1.0 - tau_soft) * lg.b, lt.activation)
        for lt, lg in zip(theta.beta.layers, target_theta.beta.layers)])
    return new


def td_error(theta: UnifiedParams, target_theta: UnifiedParams,
             tr: Transition, gamma: float) -> float:
    """r + gamma * V_target(x') - Q(x, u), with the bootstrap dropped on done.

    The free maximum of the target problem stands in for the maximized
    Q-value of the next state, which is the same number by construction.
    """
    qv, _ = q_value(theta, tr.x, tr.u)
    if tr.done:
        return float(tr.reward) - qv
    v_next, _ = value(target_theta, tr.x_next)
    return float(tr.reward) + gamma * v_next - qv


def q_learning_update(theta: UnifiedParams, batch: Sequence[Transition],
                      cfg: TrainConfig,
                      target_theta: Optional[UnifiedParams] = None
                      ) -> Tuple[UnifiedParams, float]:
    """One semi-gradient descent step on the mean squared TD error.

    The bootstrap term is evaluated under ``target_theta`` (defaulting to
    the live parameters) and held fixed; only the pinned Q-value term is
    differentiated. Returns the updated parameters and the pre-update mean
    squared TD error.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    if target_theta is None:
        target_theta = theta
    B = len(batch)
    accum = ThetaGrad.zeros(theta)
    td_sq = 0.0
    for tr in batch:
        qv, qsol = q_value(theta, tr.x, tr.u)
        if tr.done:
            t = float(tr.reward) - qv
        else:
            v_next, _ = value(target_theta, tr.x_next)
            t = float(tr.reward) + cfg.gamma * v_next - qv
        td_sq += t * t / B
        # d(mean T^2)/d theta = mean 2 T dT = -mean 2 T dQ; descend on it.
        accum.add_(grad_q_value(theta, tr.x, tr.u, upstream=2.0 * t / B,
                                solution=qsol).clip_(cfg.clip_norm))
    accum.clip_(cfg.clip_norm)
    return apply_update(theta, accum, cfg.alpha_critic), td_sq


def q_learning_episode(env, theta: UnifiedParams, target_theta: UnifiedParams,
                       buffer: ReplayBuffer, cfg: TrainConfig,
                       rng: np.random.Generator
                       ) -> Tuple[UnifiedParams, UnifiedParams, EpisodeStats]:
    """One exploration episode with interleaved replay updates.

    Actions are the deterministic policy plus clipped Gaussian exploration
    noise; every ``cfg.update_every`` steps one batch update runs and the
    target blends toward the live parameters.
    """
    x = env.reset(rng)
    total = 0.0
    steps = 0
    losses = []
    bound = getattr(env, "input_bound", np.inf)
    while steps < cfg.t_max and not env.is_terminal(x):
        eps = rng.standard_normal(theta.m_u)
        u = np.clip(policy(theta, x) + cfg.explore_sigma * eps, -bound, bound)
        x_next, r, done = env.step(x, u)
        # A cut-off exit is not a completed episode: its value bootstrap
        # must survive, else ending badly looks free under negative rewards.
        done_terminal = done and not env.truncated_exit(x_next)
        buffer.push(Transition(x=np.asarray(x, dtype=float), u=u, reward=r,
                               x_next=x_next, done=done_terminal, epsilon=eps))
        total += r
        steps += 1
        x = x_next
        if steps % cfg.update_every == 0 and len(buffer) >= cfg.batch:
            batch = buffer.sample(rng, cfg.batch)
            theta, td_sq = q_learning_update(theta, batch, cfg, target_theta)
            target_theta = soft_update(target_theta, theta, cfg.tau_soft)
            losses.append(td_sq)
        if done:
            break
    loss = float(np.mean(losses)) if losses else float("nan")
    return theta, target_theta, EpisodeStats(episode_return=total, steps=steps,
                                             critic_loss=loss, td_mean_sq=loss)


def a2c_episode(env, theta: UnifiedParams, target_theta: UnifiedParams,
                cfg: TrainConfig, noise_source: np.random.Generator
                ) -> Tuple[UnifiedParams, UnifiedParams, EpisodeStats]:
    """One advantage actor-critic episode with a single update at the end.

    The rollout samples the stochastic policy; gradients for both the actor
    (log-density scaled by the advantage) and the critic (squared return
    error) accumulate under the frozen pre-episode parameters and apply
    once when the episode closes. Returns-to-go bootstrap from the frozen
    value at the cutoff state unless the episode ended in a terminal state.
    """
    x = env.reset(noise_source)
    traj = []
    total = 0.0
    while len(traj) < cfg.t_max and not env.is_terminal(x):
        s = sample_action(theta, x, noise_source)
        x_next, r, done = env.step(x, s.u)
        done_terminal = done and not env.truncated_exit(x_next)
        traj.append((np.asarray(x, dtype=float), s, float(r), x_next,
                     done_terminal))
        total += r
        x = x_next
        if done:
            break

    if not traj:
        stats = EpisodeStats(episode_return=0.0, steps=0,
                             critic_loss=float("nan"), td_mean_sq=float("nan"))
        return theta, target_theta, stats

    if traj[-1][4]:
        boot_value = 0.0
    else:
        boot_value, _ = value(theta, traj[-1][3])
    rets = returns_to_go([r for (_, _, r, _, _) in traj], boot_value, cfg.gamma)
    values = [s._solution.value for (_, s, _, _, _) in traj]
    advs = np.array(rets) - np.array(values)
    offset = float(advs.mean()) if cfg.center_advantages else 0.0

    # Raw gradients accumulate in natural units and are clipped before the
    # step sizes scale them; near-degenerate solutions can spike the
    # solution sensitivities by orders of magnitude.
    g_actor = ThetaGrad.zeros(theta)
    g_critic = ThetaGrad.zeros(theta)
    critic_loss = 0.0
    td_sq = 0.0
    v_next = boot_value
    for (x_i, s_i, r_i, x_next_i, done_i), adv in zip(reversed(traj),
                                                      reversed(advs)):
        adv_c = adv - offset
        g_actor.add_(grad_log_prob(theta, x_i, s_i, scale=adv_c,
                                   solution=s_i._solution).clip_(cfg.clip_norm))
        g_critic.add_(grad_value(theta, x_i, upstream=2.0 * adv_c,
                                 solution=s_i._solution).clip_(cfg.clip_norm))
        critic_loss += adv * adv / len(traj)
        # TD diagnostic uses the executed (box-clipped) action, matching the
        # reward actually observed.
        bound = getattr(env, "input_bound", np.inf)
        qv, _ = q_value(theta, x_i, np.clip(s_i.u, -bound, bound))
        boot = 0.0 if done_i else cfg.gamma * v_next
        td_sq += (r_i + boot - qv) ** 2 / len(traj)
        v_next = s_i._solution.value
    g_actor.clip_(cfg.clip_norm)
    g_critic.clip_(cfg.clip_norm)
    accum = ThetaGrad.zeros(theta)
    accum.add_(g_actor, cfg.alpha_actor)
    accum.add_(g_critic, cfg.alpha_critic)
    theta_new = apply_update(theta, accum, 1.0)
    target_new = soft_update(target_theta, theta_new, cfg.tau_soft)
    stats = EpisodeStats(episode_return=total, steps=len(traj),
                         critic_loss=float(critic_loss), td_mean_sq=float(td_sq))
    return theta_new, target_new, stats


def reinforce_update(theta: UnifiedParams,
                     episodes: Sequence[Sequence[Tuple[np.ndarray, PolicySample, float]]],
                     cfg: TrainConfig) -> UnifiedParams:
    """Plain policy-gradient ascent scaled by returns-to-go.

    ``episodes`` holds trajectories of ``(x, sample, reward)`` generated by
    the current stochastic policy (samples replayable from stored noise).
    The gradient averages over all steps of all trajectories.
    """
    accum = ThetaGrad.zeros(theta)
    n_steps = sum(len(ep) for ep in episodes)
    if n_steps == 0:
        return theta
    for ep in episodes:
        rets = returns_to_go([r for (_, _, r) in ep], 0.0, cfg.gamma)
        for (x_i, s_i, _), ret in zip(ep, rets):
            if s_i._solution is None:
                s_i = action_from_noise(theta, x_i, s_i.epsilon)
            accum.add_(grad_log_prob(theta, x_i, s_i, scale=ret / n_steps,
                                     solution=s_i._solution))
    accum.clip_(cfg.clip_norm)
    return apply_update(theta, accum, cfg.alpha_actor)
