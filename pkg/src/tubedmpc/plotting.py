"""Matplotlib renderings of closed-loop records (SVG by default)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Ellipse  # noqa: E402

plt.rcParams["svg.hashsalt"] = "tubedmpc"  # deterministic SVG ids

__all__ = ["plot_trajectory", "plot_campaign", "ellipse_patch"]


def ellipse_patch(P: np.ndarray, level: float, **kw) -> Ellipse:
    """Patch for ``{x ∈ R^2 : x^T P x <= level}``."""
    evals, evecs = np.linalg.eigh(P)
    half = np.sqrt(level / evals)
    angle = np.degrees(np.arctan2(evecs[1, 0], evecs[0, 0]))
    return Ellipse((0.0, 0.0), 2 * half[0], 2 * half[1], angle=angle, **kw)


def plot_trajectory(rec, path: str | Path, net, bundle) -> None:
    """Three rows: agent states over time, terminal-set cross-sections with the
    final planned state, and the terminal levels ``α_i(k)``.

    Ellipses carry ``gid="terminal_ellipse_<i>"`` and α lines
    ``gid="alpha_trace_<i>"`` so the SVG can be inspected programmatically.
    """
    M = net.M
    X = rec.states()
    A = rec.alphas()
    k = np.array([s.k for s in rec.steps])
    fig, axes = plt.subplots(3, M, figsize=(4 * M, 9), squeeze=False)
    for i in range(M):
        ax = axes[0, i]
        idx = net.state_index(i)
        for c, j in enumerate(idx):
            ax.plot(k, X[:, j], label=f"x_{j + 1}")
        ax.set_title(f"agent {i + 1}: states")
        ax.set_xlabel("k")
        ax.legend(fontsize=7)

        ax = axes[1, i]
        feas = np.isfinite(A[:, i])
        level = float(A[feas, i][-1]) if feas.any() else 1.0
        if net.agents[i].n == 2:
            e = ellipse_patch(bundle.P_f[i], level, fill=False, lw=1.5, color=f"C{i}")
            e.set_gid(f"terminal_ellipse_{i}")
            ax.add_patch(e)
            ax.plot(X[:, idx[0]], X[:, idx[1]], ".-", ms=2, lw=0.6, color="0.4")
            r = np.sqrt(level / np.linalg.eigvalsh(bundle.P_f[i]).min())
            span = max(r, np.abs(X[:, idx]).max() if len(X) else r) * 1.1
            ax.set_xlim(-span, span)
            ax.set_ylim(-span, span)
        ax.set_title(f"agent {i + 1}: terminal set at final α")

        ax = axes[2, i]
        (ln,) = ax.plot(k, A[:, i], color=f"C{i}")
        ln.set_gid(f"alpha_trace_{i}")
        ax.set_title(f"α_{i + 1}(k)")
        ax.set_xlabel("k")
    fig.tight_layout()
    fig.savefig(path, format=Path(path).suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)


def plot_campaign(report: dict, path: str | Path) -> None:
    """Bar chart of infeasibility / violation rates and per-agent α ranges for a campaign report."""
    ctrls = list(report["controllers"])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    x = np.arange(len(ctrls))
    inf = [report["controllers"][c]["infeasibility_rate"] for c in ctrls]
    vio = [report["controllers"][c]["constraint_violation_rate"] for c in ctrls]
    ax1.bar(x - 0.2, inf, 0.4, label="infeasibility rate")
    ax1.bar(x + 0.2, vio, 0.4, label="violation rate")
    ax1.set_xticks(x, [c.lower() for c in ctrls])
    ax1.set_ylim(0, 1)
    ax1.legend(fontsize=7)
    ax1.set_title(f"{report['trials']} trials, {report['mode']}")
    for k, c in enumerate(ctrls):
        r = report["controllers"][c]
        if r["alpha_min"] is None:
            continue
        lo, hi, mean = map(np.asarray, (r["alpha_min"], r["alpha_max"], r["alpha_mean"]))
        agents = np.arange(1, len(lo) + 1) + 0.15 * (k - (len(ctrls) - 1) / 2)
        ax2.errorbar(agents, mean, yerr=[mean - lo, hi - mean], fmt="o", capsize=3, label=c.lower())
    ax2.set_yscale("log")
    ax2.set_xlabel("agent")
    ax2.set_title("α range over feasible steps")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format=Path(path).suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)
