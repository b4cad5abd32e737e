"""Training curves from log CSVs, rendered to SVG with matplotlib."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidInputError  # noqa: E402

BOUND_GID = "bound-line"
DPI = 72  # one pixel per SVG point


class SchemaError(InvalidInputError):
    pass


@dataclass
class Series:
    label: str
    x: list
    y: list


def read_log(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        return list(reader.fieldnames), list(reader)


def _cost_columns(header, metric):
    return sorted(c for c in header if c.startswith(metric + "_"))


def load_runs(paths, metric: str = "dcost") -> tuple[list[Series], list[Series]]:
    """Reward and cost series per log; the cost series is the max over agents' ``metric`` columns."""
    rewards, costs = [], []
    reference = None
    for p in paths:
        header, rows = read_log(p)
        missing = [c for c in ("iteration", "episode_reward") if c not in header]
        cols = _cost_columns(header, metric)
        if missing or not cols:
            raise SchemaError(f"{p}: missing columns {missing or [metric + '_*']}")
        if reference is None:
            reference = cols
        elif cols != reference:
            raise SchemaError(f"{p}: cost columns {cols} differ from {reference}")
        x, r, c = [], [], []
        for row in rows:
            if not row["episode_reward"]:
                continue  # aborted iteration
            x.append(int(row["iteration"]))
            r.append(float(row["episode_reward"]))
            c.append(max(float(row[k]) for k in cols))
        label = Path(p).parent.name or Path(p).stem
        rewards.append(Series(label, x, r))
        costs.append(Series(label, x, c))
    return rewards, costs


def _figure(series, ylabel, title):
    fig, ax = plt.subplots(figsize=(6, 4), dpi=DPI)
    for s in series:
        style = "o-" if len(s.x) == 1 else "-"
        ax.plot(s.x, s.y, style, label=s.label, gid=f"series-{s.label}")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if series:
        ax.legend(loc="best", fontsize="small")
    return fig, ax


def bound_svg_y(fig, ax, bound: float) -> float:
    """SVG y coordinate (points, origin top-left) at which ``bound`` is drawn."""
    _, y_disp = ax.transData.transform((ax.get_xlim()[0], bound))
    height_pt = fig.get_figheight() * 72.0
    return height_pt - y_disp * 72.0 / fig.dpi


def plot_runs(paths, out_dir, bound: float | None = None, metric: str = "dcost") -> dict:
    """Write ``reward.svg`` and ``cost.svg``; the cost plot carries the bound as a horizontal line.

    Returns the written paths and, when a bound is drawn, its SVG y coordinate
    (the line has ``gid="bound-line"``).
    """
    rewards, costs = load_runs(paths, metric)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, _ = _figure(rewards, "mean episode reward", "reward")
    reward_path = out / "reward.svg"
    fig.savefig(reward_path, format="svg")
    plt.close(fig)

    fig, ax = _figure(costs, f"episode cost ({metric})", "cost")
    info = {"reward": str(reward_path), "cost": str(out / "cost.svg")}
    if bound is not None and math.isfinite(bound):
        ax.axhline(bound, color="k", linestyle="--", linewidth=1, gid=BOUND_GID, label=f"bound {bound:g}")
        ax.legend(loc="best", fontsize="small")
        fig.canvas.draw()
        info["bound_y"] = bound_svg_y(fig, ax, bound)
    fig.savefig(out / "cost.svg", format="svg")
    plt.close(fig)
    return info
