"""Command-line interface.

Exit codes: 0 on success, 2 on configuration problems, 3 on numerical
failures inside a run.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness
from .baseline import mc_return
from .envs import make_env
from .errors import (ConfigError, CorruptFileError, EnvMismatchError,
                     InfeasibleError, MaxIterationsError, RankDeficientError,
                     SingularKktError, VersionMismatchError)
from .unified import policy

_CONFIG_ERRORS = (ConfigError, EnvMismatchError, VersionMismatchError,
                  CorruptFileError, FileNotFoundError)
_NUMERIC_ERRORS = (InfeasibleError, MaxIterationsError, SingularKktError,
                   RankDeficientError, FloatingPointError)


def _load(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _cmd_train(args) -> int:
    cfg = _load(args)
    art = harness.run(cfg)
    last = art.rows[-1] if art.rows else None
    if last is not None:
        print(f"finished {last['episode']} episodes; "
              f"final evaluation return {last['return_mean']:.6g} "
              f"(+/- {last['return_stderr']:.2g})")
    print(f"artifacts in {art.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    theta = harness.load_checkpoint(args.checkpoint)
    env = make_env(cfg.env)
    est = mc_return(env, lambda x: policy(theta, x),
                    args.n_rollouts or cfg.eval_n_rollouts,
                    seed=cfg.seed, gamma=1.0, t_max=cfg.eval_t_max)
    print(f"return mean {est.mean:.17g} stderr {est.std_error:.17g} "
          f"over {len(est.per_rollout)} rollouts")
    return 0


def _cmd_compare(args) -> int:
    cfg = _load(args)
    csv_path, summary = harness.compare_mpc(cfg, args.checkpoint)
    print(f"learned mean {summary['learned_mean']:.17g}")
    print(f"mpc mean     {summary['mpc_mean']:.17g}")
    print(f"ratio (mpc/learned, >=1 means learned at least matches) "
          f"{summary['ratio']:.6f}")
    print(f"per-state returns in {csv_path}")
    return 0


def _cmd_switch_demo(args) -> int:
    cfg = harness.switch_demo_config(_load(args))
    art = harness.run(cfg)
    print(f"two-phase run complete; curves in {art.curves_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qprl",
                                description="QP-structured reinforcement learning")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run the configured training phases")
    tr.add_argument("--config", required=True)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out")
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpointed policy")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--n-rollouts", type=int, dest="n_rollouts")
    ev.set_defaults(fn=_cmd_eval)

    cm = sub.add_parser("compare-mpc",
                        help="paired comparison of a checkpoint against MPC")
    cm.add_argument("--checkpoint", required=True)
    cm.add_argument("--config", required=True)
    cm.add_argument("--seed", type=int)
    cm.add_argument("--out")
    cm.set_defaults(fn=_cmd_compare)

    sw = sub.add_parser("switch-demo",
                        help="two-phase preset: qlearn then a2c on one parameter set")
    sw.add_argument("--config", required=True)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out")
    sw.set_defaults(fn=_cmd_switch_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
