"""Figure rendering for run artifacts; PNG files land next to the CSVs."""

from __future__ import annotations

from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def curves_figure(rows: Sequence[dict], path: str,
                  switch_episodes: Optional[List[int]] = None) -> str:
    """Learning curves: evaluation return with its error band on top,
    critic loss and mean squared TD error below."""
    eps = [r["episode"] for r in rows]
    mean = np.array([r["return_mean"] for r in rows], dtype=float)
    err = np.array([r["return_stderr"] for r in rows], dtype=float)
    closs = np.array([r["critic_loss"] for r in rows], dtype=float)
    td = np.array([r["td_mean_sq"] for r in rows], dtype=float)

    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax0.plot(eps, mean, marker="o", ms=3, lw=1.2, color="tab:blue")
    ax0.fill_between(eps, mean - err, mean + err, alpha=0.25, color="tab:blue")
    ax0.set_ylabel("evaluation return")
    ax0.grid(alpha=0.3)

    ok = np.isfinite(closs)
    ax1.plot(np.array(eps)[ok], closs[ok], marker="o", ms=3, lw=1.2,
             color="tab:red", label="critic loss")
    ok_td = np.isfinite(td)
    ax1.plot(np.array(eps)[ok_td], td[ok_td], marker="s", ms=3, lw=1.0,
             color="tab:orange", label="mean TD$^2$")
    if (closs[ok] > 0).all() and (td[ok_td] > 0).all() and ok.any():
        ax1.set_yscale("log")
    ax1.set_xlabel("episode")
    ax1.set_ylabel("training error")
    ax1.legend(loc="best", fontsize=9)
    ax1.grid(alpha=0.3)

    for ax in (ax0, ax1):
        for edge in switch_episodes or []:
            ax.axvline(edge, color="gray", ls="--", lw=1)

    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def compare_figure(rows: Sequence[dict], path: str) -> str:
    """Per-initial-state returns of the learned policy against MPC."""
    learned = np.array([r["learned_return"] for r in rows], dtype=float)
    mpc = np.array([r["mpc_return"] for r in rows], dtype=float)

    fig, ax = plt.subplots(figsize=(5.5, 5.2))
    ax.scatter(mpc, learned, s=14, alpha=0.7, color="tab:blue")
    lo = min(mpc.min(), learned.min())
    hi = max(mpc.max(), learned.max())
    pad = 0.03 * (hi - lo + 1e-12)
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="gray", lw=1,
            ls="--", label="parity")
    ax.set_xlabel("MPC return")
    ax.set_ylabel("learned-policy return")
    ax.legend(loc="best", fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
