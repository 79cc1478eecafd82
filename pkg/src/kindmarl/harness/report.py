"""Reading run summaries and comparing methods."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


class ComparisonError(ValueError):
    """Summaries that cannot be compared (different env or seed sets)."""


@dataclass
class RunSummary:
    run: str
    method: str
    env: str
    seeds: tuple[int, ...]
    tail_mean: float
    tail_std: float = 0.0

    @property
    def label(self) -> str:
        return self.run if self.run else self.method


def read_summary(path: str | Path) -> RunSummary:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.csv"
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ComparisonError(f"{path}: {exc.strerror}") from None
    agg = [r for r in rows if r.get("seed") == "aggregate"]
    seeds = tuple(sorted(int(r["seed"]) for r in rows if r.get("seed") != "aggregate" and r["status"] == "ok"))
    if not agg or not agg[0]["tail_mean_collective"]:
        raise ComparisonError(f"{path}: no successful aggregate row")
    a = agg[0]
    return RunSummary(a["run"], a["method"], a["env"], seeds, float(a["tail_mean_collective"]), float(a["tail_std_collective"] or 0.0))


def percentage_difference(a: float, b: float) -> float:
    """How much more A earned than B, in percent of B."""
    return (a - b) / b * 100.0


@dataclass
class Comparison:
    summaries: list[RunSummary]
    percent: dict[tuple[str, str], float]

    def format(self) -> str:
        lines = ["run,method,tail_mean_collective,tail_std_collective"]
        for s in self.summaries:
            lines.append(f"{s.label},{s.method},{s.tail_mean:.4f},{s.tail_std:.4f}")
        lines.append("")
        lines.append("a,b,percent_more")
        for (a, b), pct in self.percent.items():
            lines.append(f"{a},{b},{pct:.2f}")
        return "\n".join(lines) + "\n"


def compare_methods(summaries: Sequence[RunSummary]) -> Comparison:
    if len(summaries) < 2:
        raise ComparisonError("need at least two summaries to compare")
    envs = {s.env for s in summaries}
    if len(envs) > 1:
        raise ComparisonError(f"summaries come from different environments: {sorted(envs)}")
    seed_sets = {s.seeds for s in summaries}
    if len(seed_sets) > 1:
        raise ComparisonError("summaries use different seed sets")
    labels = [s.label for s in summaries]
    if len(set(labels)) != len(labels):
        raise ComparisonError("duplicate run labels")
    percent = {}
    for a in summaries:
        for b in summaries:
            if a is not b:
                percent[(a.label, b.label)] = percentage_difference(a.tail_mean, b.tail_mean)
    return Comparison(list(summaries), percent)
