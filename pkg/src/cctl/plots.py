"""Figures for the ``report`` subcommand, rendered off-screen to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def auc_per_epoch(report: dict, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for run in report["runs"]:
            pts = [(e["epoch"], e["test"]["auc"]) for e in run["epochs"] if e["test"]["auc"] is not None]
            if pts:
                x, y = zip(*pts)
                ax.plot(x, y, marker="o", ms=3, label=f"seed {run['seed']}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("target test AUC")
        ax.set_title(f"{report['method']} ({report['config_hash']})")
        if report["runs"]:
            ax.legend()
        return _save(fig, Path(path))


def reward_trace(report: dict, path, window: int = 50) -> Path:
    """Information gain per step, raw and smoothed with a trailing moving average."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for run in report["runs"]:
            r = np.asarray(run.get("rewards") or [], dtype=float)
            if not len(r):
                continue
            line, = ax.plot(np.arange(1, len(r) + 1), r, lw=0.4, alpha=0.35)
            if len(r) >= window:
                smooth = np.convolve(r, np.ones(window) / window, mode="valid")
                ax.plot(np.arange(window, len(r) + 1), smooth, color=line.get_color(), lw=1.4,
                        label=f"seed {run['seed']}")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("step")
        ax.set_ylabel("r = loss_pure - loss_tgt")
        if ax.get_legend_handles_labels()[0]:
            ax.legend()
        return _save(fig, Path(path))


def selector_histograms(report: dict, path, max_snapshots: int = 6) -> Path:
    """Selector weight distributions at evenly spaced update windows (first seed)."""
    snaps = report["runs"][0].get("selector") if report["runs"] else []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if snaps:
            pick = np.unique(np.linspace(0, len(snaps) - 1, min(max_snapshots, len(snaps))).astype(int))
            edges = np.linspace(0.0, 1.0, len(snaps[0]["hist"]) + 1)
            centers = 0.5 * (edges[:-1] + edges[1:])
            cmap = plt.get_cmap("viridis")
            for k, i in enumerate(pick):
                h = np.asarray(snaps[i]["hist"], dtype=float)
                ax.step(centers, h / max(h.sum(), 1.0), where="mid", color=cmap(k / max(len(pick) - 1, 1)),
                        label=f"step {snaps[i]['step']}")
            ax.legend()
        else:
            ax.text(0.5, 0.5, "no selector updates", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel("selector weight p")
        ax.set_ylabel("fraction of source samples")
        return _save(fig, Path(path))


def sweep_curve(rows: list[dict], param: str, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = [float(r["value"]) for r in rows]
        y = np.array([float(r["auc_mean"]) for r in rows])
        err = np.array([float(r["auc_std"]) for r in rows])
        ax.errorbar(x, y, yerr=err, marker="o", ms=4, capsize=3)
        ax.set_xlabel(param)
        ax.set_ylabel("mean target test AUC")
        return _save(fig, Path(path))


def render_report(report: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    figs = [auc_per_epoch(report, out / "auc_per_epoch.png")]
    if any(run.get("rewards") for run in report["runs"]):
        figs.append(reward_trace(report, out / "reward_trace.png"))
    if any(run.get("selector") for run in report["runs"]):
        figs.append(selector_histograms(report, out / "selector_hist.png"))
    return figs
