"""Reward-curve figures: one per run plus an overlay of all runs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import yaml  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "kindmarl",
    "svg.fonttype": "none",
}
SEED_ALPHA = 0.3
FIG_SIZE = (4.8, 3.0)


class MetricsError(ValueError):
    pass


def read_collective(path: Path) -> np.ndarray:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        return np.array([float(r["collective_extrinsic"]) for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise MetricsError(f"{path}: cannot read collective rewards ({exc})") from None


def discover_runs(metrics_dir: Path) -> dict[str, dict[int, np.ndarray]]:
    """Map run label -> {seed: per-episode collective reward}."""
    runs: dict[str, dict[int, np.ndarray]] = {}
    for ep_file in sorted(metrics_dir.rglob("seed_*/episodes.csv")):
        run_dir = ep_file.parent.parent
        label = run_dir.relative_to(metrics_dir).as_posix() if run_dir != metrics_dir else run_dir.name
        resolved = run_dir / "resolved_config.yaml"
        if resolved.exists():
            method = yaml.safe_load(resolved.read_text(encoding="utf-8")).get("method")
            if method and method not in label:
                label = f"{label} ({method})"
        seed = int(ep_file.parent.name.split("_", 1)[1])
        runs.setdefault(label, {})[seed] = read_collective(ep_file)
    return runs


def plot_reward_curves(ax, curves: dict[int, np.ndarray], color=None, label: str | None = None):
    """Translucent per-seed traces plus an opaque mean trace.

    Returns (seed_lines, mean_line). Seeds of unequal length are averaged over
    their common prefix.
    """
    seed_lines = []
    for seed, y in sorted(curves.items()):
        (line,) = ax.plot(np.arange(len(y)), y, color=color, alpha=SEED_ALPHA, linewidth=0.8)
        color = line.get_color()
        seed_lines.append(line)
    n = min(len(y) for y in curves.values())
    mean = np.mean([y[:n] for y in curves.values()], axis=0)
    (mean_line,) = ax.plot(np.arange(n), mean, color=color, alpha=1.0, linewidth=1.6, label=label)
    return seed_lines, mean_line


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_=." else "_" for ch in label)


def emit_plots(metrics_dir: str | Path, out_dir: str | Path | None = None, fmt: str = "svg") -> list[Path]:
    metrics_dir = Path(metrics_dir)
    if not metrics_dir.is_dir():
        raise MetricsError(f"{metrics_dir}: not a directory")
    runs = discover_runs(metrics_dir)
    if not runs:
        raise MetricsError(f"{metrics_dir}: no seed_*/episodes.csv files found")
    out_dir = Path(out_dir) if out_dir is not None else metrics_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        for label, curves in runs.items():
            fig, ax = plt.subplots(figsize=FIG_SIZE)
            plot_reward_curves(ax, curves, label=f"mean of {len(curves)}")
            ax.set_title(label)
            ax.set_xlabel("episode")
            ax.set_ylabel("collective extrinsic reward")
            ax.legend(frameon=False)
            fig.tight_layout()
            path = out_dir / f"reward_{_safe(label)}.{fmt}"
            fig.savefig(path, metadata={"Date": None} if fmt == "svg" else None)
            plt.close(fig)
            written.append(path)

        fig, ax = plt.subplots(figsize=FIG_SIZE)
        for label, curves in runs.items():
            plot_reward_curves(ax, curves, label=label)
        ax.set_xlabel("episode")
        ax.set_ylabel("collective extrinsic reward")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = out_dir / f"comparison.{fmt}"
        fig.savefig(path, metadata={"Date": None} if fmt == "svg" else None)
        plt.close(fig)
        written.append(path)
    return written
