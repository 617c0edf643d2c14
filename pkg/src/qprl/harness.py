"""Experiment orchestration: flat-file configuration, deterministic seeding,
phase-wise training with periodic evaluation, checkpointing, and CSV/figure
artifacts.

Every number written to an artifact is reproducible from ``(config, seed)``:
the root seed fans out to fixed named streams (init / train / eval /
compare), each derived by counter so adding evaluation points never disturbs
training randomness.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from . import report
from .algos import (EpisodeStats, ReplayBuffer, TrainConfig, a2c_episode,
                    q_learning_episode, reinforce_update, sample_action)
from .baseline import MpcProblem, mc_return, mpc_policy, rollout_return
from .envs import make_env
from .errors import (ConfigError, CorruptFileError, EnvMismatchError,
                     VersionMismatchError)
from .lifting import (Layer, LiftingNet, build_koopman_structure,
                      build_mpc_lifting, edmd_pretrain, mlp_net,
                      pendulum_dictionary, sysid_least_squares)
from .unified import UnifiedParams, policy, random_params
from .diffqp import SoftConfig

CHECKPOINT_FORMAT = "qprl-theta"
CHECKPOINT_VERSION = 1

# Named sub-stream indices of the root seed.
_STREAM_INIT = 0
_STREAM_TRAIN = 1
_STREAM_EVAL = 2
_STREAM_COMPARE = 3

_ALGOS = ("qlearn", "a2c", "reinforce")


@dataclass
class RunConfig:
    env: str = "linear"
    phases: Tuple[Tuple[str, int], ...] = (("a2c", 100),)
    init: str = "mpc_sysid"
    seed: int = 0
    gamma: float = 1.0
    alpha_actor: float = 1e-5
    alpha_critic: float = 1e-5
    tau_soft: float = 0.05
    t_max: int = 50
    explore_sigma: float = 0.2
    batch: int = 8
    update_every: int = 2
    buffer_capacity: int = 10_000
    clip_norm: float = 1.0
    center_advantages: bool = True
    sigma0: float = 0.1
    mpc_horizon: int = 10
    pendulum_horizon: int = 2
    pendulum_terminal_scale: float = 3.0
    eval_n_rollouts: int = 20
    eval_every: int = 10
    eval_t_max: int = 200
    compare_n_rollouts: int = 100
    output_dir: str = "runs/out"

    def train_config(self) -> TrainConfig:
        return TrainConfig(gamma=self.gamma, alpha_actor=self.alpha_actor,
                           alpha_critic=self.alpha_critic,
                           tau_soft=self.tau_soft, t_max=self.t_max,
                           episodes=max(sum(n for _, n in self.phases), 1),
                           explore_sigma=self.explore_sigma, batch=self.batch,
                           seed=self.seed, update_every=self.update_every,
                           buffer_capacity=self.buffer_capacity,
                           clip_norm=self.clip_norm,
                           center_advantages=self.center_advantages)


# Dotted config keys and the coercion applied to their values.
def _parse_phases(text: str) -> Tuple[Tuple[str, int], ...]:
    phases = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"phase '{part}' must look like algo:count")
        name, count = part.split(":", 1)
        name = name.strip()
        if name not in _ALGOS:
            raise ConfigError(f"unknown algorithm '{name}'")
        try:
            n = int(count)
        except ValueError as exc:
            raise ConfigError(f"bad episode count in phase '{part}'") from exc
        if n < 0:
            raise ConfigError(f"negative episode count in phase '{part}'")
        phases.append((name, n))
    if not phases:
        raise ConfigError("at least one phase is required")
    return tuple(phases)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{text}'")


_KEYMAP = {
    "env": ("env", str),
    "phases": ("phases", _parse_phases),
    "init": ("init", str),
    "seed": ("seed", int),
    "gamma": ("gamma", float),
    "alpha_actor": ("alpha_actor", float),
    "alpha_critic": ("alpha_critic", float),
    "tau_soft": ("tau_soft", float),
    "t_max": ("t_max", int),
    "explore_sigma": ("explore_sigma", float),
    "batch": ("batch", int),
    "update_every": ("update_every", int),
    "buffer_capacity": ("buffer_capacity", int),
    "clip_norm": ("clip_norm", float),
    "center_advantages": ("center_advantages", _parse_bool),
    "sigma0": ("sigma0", float),
    "mpc.horizon": ("mpc_horizon", int),
    "pendulum.horizon": ("pendulum_horizon", int),
    "pendulum.terminal_scale": ("pendulum_terminal_scale", float),
    "eval.n_rollouts": ("eval_n_rollouts", int),
    "eval.every": ("eval_every", int),
    "eval.t_max": ("eval_t_max", int),
    "compare.n_rollouts": ("compare_n_rollouts", int),
    "output_dir": ("output_dir", str),
}


def parse_config(text: str) -> RunConfig:
    """Parse the flat ``key = value`` format; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _KEYMAP:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        attr, coerce = _KEYMAP[key]
        try:
            values[attr] = coerce(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {val}") from exc
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def validate_config(cfg: RunConfig) -> None:
    if cfg.env not in ("linear", "pendulum"):
        raise ConfigError(f"unknown environment '{cfg.env}'")
    if cfg.init not in ("mpc_sysid", "koopman_dict", "random"):
        raise ConfigError(f"unknown init mode '{cfg.init}'")
    if cfg.env == "pendulum" and cfg.init == "mpc_sysid":
        raise ConfigError("mpc_sysid initialization requires the linear environment")
    if cfg.eval_n_rollouts < 1 or cfg.compare_n_rollouts < 1:
        raise ConfigError("rollout counts must be positive")
    if cfg.eval_every < 1:
        raise ConfigError("eval.every must be positive")
    if not 0.0 < cfg.gamma <= 1.0:
        raise ConfigError("gamma must lie in (0, 1]")


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def config_as_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "phases":
            v = ",".join(f"{a}:{n}" for a, n in v)
        out[f.name] = v
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def _enc_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float.hex(float(v)) for v in a.ravel()]}


def _dec_array(d: dict) -> np.ndarray:
    data = np.array([float.fromhex(v) for v in d["data"]], dtype=float)
    return data.reshape(d["shape"])


def theta_payload(theta: UnifiedParams) -> dict:
    return {
        "Mfactor": _enc_array(theta.Mfactor),
        "q": _enc_array(theta.q),
        "Aeq": _enc_array(theta.Aeq),
        "Beq": _enc_array(theta.Beq),
        "beq": _enc_array(theta.beq),
        "Cineq": _enc_array(theta.Cineq),
        "Dineq": _enc_array(theta.Dineq),
        "dineq": _enc_array(theta.dineq),
        "beta": [{"W": _enc_array(l.W), "b": _enc_array(l.b),
                  "activation": l.activation} for l in theta.beta.layers],
        "K": _enc_array(theta.K),
        "Lraw": _enc_array(theta.Lraw),
        "sigma_min": float.hex(float(theta.sigma_min)),
        "soft": {"rho_lin": float.hex(float(theta.soft.rho_lin)),
                 "rho_quad": float.hex(float(theta.soft.rho_quad)),
                 "soften_equalities": bool(theta.soft.soften_equalities)},
    }


def theta_from_payload(payload: dict) -> UnifiedParams:
    soft = SoftConfig(rho_lin=float.fromhex(payload["soft"]["rho_lin"]),
                      rho_quad=float.fromhex(payload["soft"]["rho_quad"]),
                      soften_equalities=payload["soft"]["soften_equalities"])
    beta = LiftingNet([Layer(_dec_array(l["W"]), _dec_array(l["b"]),
                             l["activation"]) for l in payload["beta"]])
    return UnifiedParams(
        Mfactor=_dec_array(payload["Mfactor"]), q=_dec_array(payload["q"]),
        Aeq=_dec_array(payload["Aeq"]), Beq=_dec_array(payload["Beq"]),
        beq=_dec_array(payload["beq"]), Cineq=_dec_array(payload["Cineq"]),
        Dineq=_dec_array(payload["Dineq"]), dineq=_dec_array(payload["dineq"]),
        beta=beta, K=_dec_array(payload["K"]), Lraw=_dec_array(payload["Lraw"]),
        sigma_min=float.fromhex(payload["sigma_min"]), soft=soft)


def _canonical(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(theta: UnifiedParams, path: str) -> None:
    """Write a versioned, checksummed, hex-exact parameter snapshot."""
    payload = theta_payload(theta)
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "checksum": hashlib.sha256(_canonical(payload)).hexdigest(),
           "payload": payload}
    _atomic_write(path, json.dumps(doc, sort_keys=True, indent=1).encode())


def load_checkpoint(path: str) -> UnifiedParams:
    """Read a checkpoint, verifying version and integrity."""
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CorruptFileError(f"{path} is not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    payload = doc.get("payload")
    digest = hashlib.sha256(_canonical(payload)).hexdigest()
    if digest != doc.get("checksum"):
        raise CorruptFileError(f"checksum mismatch in {path}")
    try:
        return theta_from_payload(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"malformed payload in {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Initialization


def initialize(cfg: RunConfig, env) -> UnifiedParams:
    """Build the starting parameter set for the configured environment."""
    rng = _stream(cfg.seed, _STREAM_INIT)
    if cfg.init == "mpc_sysid":
        trans = []
        for _ in range(20):
            x = rng.uniform(-env.init_bound, env.init_bound, size=env.n_x)
            u = rng.uniform(-env.input_bound, env.input_bound, size=env.m_u)
            x_next, _, _ = env.step(x, u)
            trans.append((x, u, x_next))
        model = sysid_least_squares(trans)
        return build_mpc_lifting(model, cfg.mpc_horizon,
                                 state_bound=env.state_bound,
                                 input_bound=env.input_bound,
                                 sigma0=cfg.sigma0)
    if cfg.init == "koopman_dict":
        dictionary = pendulum_dictionary()
        trajectories = []
        for _ in range(20):
            x = env.reset(rng)
            X = [x]
            U = []
            for _ in range(50):
                u = rng.uniform(-env.input_bound, env.input_bound, size=env.m_u)
                x, _, _ = env.step(x, u)
                X.append(x)
                U.append(u)
            trajectories.append((np.array(X), np.array(U)))
        coverage = np.column_stack([
            rng.uniform(-np.pi, np.pi, 300),
            rng.uniform(-env.rate_bound, env.rate_bound, 300)])
        trajectories.append((coverage, np.zeros((0, env.m_u))))
        net = mlp_net(rng, env.n_x, dictionary.n_z,
                      input_scale=(np.pi, env.rate_bound))
        net, predictor = edmd_pretrain(dictionary, trajectories, net)
        return build_koopman_structure(
            predictor, net, cfg.pendulum_horizon,
            stage_weights=(1.0, 0.1, 0.0, 0.0, 0.0), input_weight=0.001,
            terminal_scale=cfg.pendulum_terminal_scale,
            rate_bound=env.rate_bound, input_bound=env.input_bound,
            sigma0=cfg.sigma0)
    return random_params(rng, env.n_x, env.m_u, input_bound=env.input_bound,
                         sigma0=cfg.sigma0)


# ---------------------------------------------------------------------------
# Running


@dataclass
class RunArtifacts:
    out_dir: str
    curves_csv: str
    manifest_path: str
    checkpoints: List[str] = field(default_factory=list)
    figures: List[str] = field(default_factory=list)
    final_checkpoint: Optional[str] = None
    rows: List[dict] = field(default_factory=list)


_CURVE_COLUMNS = ("episode", "phase", "return_mean", "return_stderr",
                  "critic_loss", "td_mean_sq")


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _write_csv(path: str, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def _deterministic_policy(theta: UnifiedParams):
    return lambda x: policy(theta, x)


def _reinforce_episode(env, theta, cfg: TrainConfig, rng):
    x = env.reset(rng)
    traj = []
    total = 0.0
    while len(traj) < cfg.t_max and not env.is_terminal(x):
        s = sample_action(theta, x, rng)
        x_next, r, done = env.step(x, s.u)
        traj.append((np.asarray(x, dtype=float), s, float(r)))
        total += r
        x = x_next
        if done:
            break
    theta_new = reinforce_update(theta, [traj], cfg)
    stats = EpisodeStats(episode_return=total, steps=len(traj),
                         critic_loss=float("nan"), td_mean_sq=float("nan"))
    return theta_new, stats


def run(cfg: RunConfig, out_dir: Optional[str] = None) -> RunArtifacts:
    """Execute initialization, all phases in order and artifact writing.

    Training errors abort the run but flush the rows gathered so far and
    record the failure in the manifest before re-raising.
    """
    validate_config(cfg)
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    ck_dir = os.path.join(out, "checkpoints")
    os.makedirs(ck_dir, exist_ok=True)

    env = make_env(cfg.env)
    theta = initialize(cfg, env)
    target = theta.copy()
    tc = cfg.train_config()

    art = RunArtifacts(out_dir=out, curves_csv=os.path.join(out, "curves.csv"),
                       manifest_path=os.path.join(out, "manifest.json"))
    rows: List[dict] = []
    failure = None

    def evaluate(episode: int, phase: str, window: List[EpisodeStats]):
        est = mc_return(env, _deterministic_policy(theta), cfg.eval_n_rollouts,
                        seed=np.random.SeedSequence((cfg.seed, _STREAM_EVAL, episode)),
                        gamma=1.0, t_max=cfg.eval_t_max)
        losses = [s.critic_loss for s in window if np.isfinite(s.critic_loss)]
        tds = [s.td_mean_sq for s in window if np.isfinite(s.td_mean_sq)]
        rows.append({
            "episode": episode, "phase": phase,
            "return_mean": est.mean, "return_stderr": est.std_error,
            "critic_loss": float(np.mean(losses)) if losses else float("nan"),
            "td_mean_sq": float(np.mean(tds)) if tds else float("nan"),
        })
        ck = os.path.join(ck_dir, f"ck_ep{episode:06d}.json")
        save_checkpoint(theta, ck)
        art.checkpoints.append(ck)
        return ck

    episode = 0
    evaluate(0, "init", [])
    try:
        for phase_name, phase_count in cfg.phases:
            buffer = ReplayBuffer(cfg.buffer_capacity)
            window: List[EpisodeStats] = []
            for _ in range(phase_count):
                rng_ep = _stream(cfg.seed, _STREAM_TRAIN, episode)
                if phase_name == "qlearn":
                    theta, target, st = q_learning_episode(
                        env, theta, target, buffer, tc, rng_ep)
                elif phase_name == "a2c":
                    theta, target, st = a2c_episode(env, theta, target, tc, rng_ep)
                else:
                    theta, st = _reinforce_episode(env, theta, tc, rng_ep)
                episode += 1
                window.append(st)
                if episode % cfg.eval_every == 0:
                    evaluate(episode, phase_name, window)
                    window = []
            if window:
                evaluate(episode, phase_name, window)
    except Exception as exc:  # partial artifacts still get flushed
        failure = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        _write_csv(art.curves_csv, _CURVE_COLUMNS, rows)
        art.rows = rows
        fig = os.path.join(out, "curves.png")
        try:
            report.curves_figure(rows, fig,
                                 switch_episodes=_phase_boundaries(cfg))
            art.figures.append(fig)
        except Exception:
            if failure is None:
                raise
        manifest = {
            "format_version": 1,
            "config": config_as_dict(cfg),
            "config_sha256": hashlib.sha256(
                _canonical(config_as_dict(cfg))).hexdigest(),
            "seed": cfg.seed,
            "episodes_run": episode,
            "eval_rows": len(rows),
            "failure": failure,
        }
        _atomic_write(art.manifest_path,
                      json.dumps(manifest, sort_keys=True, indent=1).encode())
    art.final_checkpoint = art.checkpoints[-1] if art.checkpoints else None
    return art


def _phase_boundaries(cfg: RunConfig) -> List[int]:
    edges = []
    total = 0
    for _, n in cfg.phases[:-1]:
        total += n
        edges.append(total)
    return edges


def compare_mpc(cfg: RunConfig, checkpoint_path: str,
                out_dir: Optional[str] = None) -> Tuple[str, dict]:
    """Paired-seed evaluation of a checkpointed policy against MPC.

    Both controllers replay the same initial states; the summary ratio is
    ``mpc_mean / learned_mean`` so that values above one mean the learned
    policy collects at least the MPC reward (returns are nonpositive).
    """
    validate_config(cfg)
    if cfg.env != "linear":
        raise EnvMismatchError("the MPC comparison is defined for the linear system")
    if cfg.compare_n_rollouts < 1:
        raise ConfigError("compare.n_rollouts must be positive")
    out = out_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    env = make_env(cfg.env)
    theta = load_checkpoint(checkpoint_path)
    problem = MpcProblem(A=env.A, B=env.B, horizon=cfg.mpc_horizon,
                         state_bound=env.state_bound,
                         input_bound=env.input_bound)
    learned = _deterministic_policy(theta)
    baseline_policy = lambda x: mpc_policy(problem, x)  # noqa: E731

    rows = []
    for r in range(cfg.compare_n_rollouts):
        rng = _stream(cfg.seed, _STREAM_COMPARE, r)
        x0 = env.reset(rng)
        ret_l = rollout_return(env, learned, x0, gamma=1.0, t_max=cfg.eval_t_max)
        ret_m = rollout_return(env, baseline_policy, x0, gamma=1.0,
                               t_max=cfg.eval_t_max)
        row = {f"x0_{i}": float(x0[i]) for i in range(env.n_x)}
        row["learned_return"] = ret_l
        row["mpc_return"] = ret_m
        rows.append(row)

    columns = tuple(f"x0_{i}" for i in range(env.n_x)) + ("learned_return",
                                                          "mpc_return")
    csv_path = os.path.join(out, "compare.csv")
    _write_csv(csv_path, columns, rows)

    learned_mean = float(np.mean([r["learned_return"] for r in rows]))
    mpc_mean = float(np.mean([r["mpc_return"] for r in rows]))
    ratio = mpc_mean / learned_mean if learned_mean != 0.0 else float("inf")
    summary = {"learned_mean": learned_mean, "mpc_mean": mpc_mean,
               "ratio": ratio, "n_rollouts": cfg.compare_n_rollouts,
               "checkpoint": os.path.basename(checkpoint_path)}
    _atomic_write(os.path.join(out, "compare_summary.json"),
                  json.dumps(summary, sort_keys=True, indent=1).encode())
    try:
        fig = os.path.join(out, "compare.png")
        report.compare_figure(rows, fig)
    except Exception:
        pass
    return csv_path, summary


def switch_demo_config(cfg: RunConfig) -> RunConfig:
    """Two-phase preset: value-learning first, actor-critic second."""
    return replace(cfg, phases=(("qlearn", 100), ("a2c", 100)))
