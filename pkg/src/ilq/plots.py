"""Figure rendering for report paths: training curves and bound-audit scatter plots.

Every CLI command that writes delimited output also drops a PNG next to it;
these helpers own that rendering (Agg backend, no display needed).
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finite_series(rows, key):
    xs, ys = [], []
    for row in rows:
        value = row.get(key)
        if value is not None and isinstance(value, (int, float)) and math.isfinite(value):
            xs.append(row["step"])
            ys.append(value)
    return xs, ys


def render_training_figure(rows: list[dict], path, q_bound: float | None = None) -> Path:
    """Four panels: critic/actor loss, eval return, Q means, branch diagnostics."""
    path = Path(path)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    ax = axes[0, 0]
    for key in ("critic_loss", "actor_loss"):
        xs, ys = _finite_series(rows, key)
        if xs:
            ax.plot(xs, ys, label=key.replace("_", " "))
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("losses")

    ax = axes[0, 1]
    xs, ys = _finite_series(rows, "eval_return")
    if xs:
        ax.plot(xs, ys, color="tab:green")
    ax.set_xlabel("step")
    ax.set_ylabel("eval return")
    ax.set_title("evaluation return")

    ax = axes[1, 0]
    for key, color in (("q_in_mean", "tab:blue"), ("q_ood_mean", "tab:orange")):
        xs, ys = _finite_series(rows, key)
        if xs:
            ax.plot(xs, ys, color=color, label=key.replace("_", " "))
    if q_bound is not None:
        ax.axhline(q_bound, color="black", linestyle="--", linewidth=1, label="value bound")
    ax.set_xlabel("step")
    ax.set_ylabel("Q")
    ax.legend(fontsize=8)
    ax.set_title("value estimates")

    ax = axes[1, 1]
    for key, color in (("y_img_mean", "tab:purple"), ("y_lmt_mean", "tab:red")):
        xs, ys = _finite_series(rows, key)
        if xs:
            ax.plot(xs, ys, color=color, label=key.replace("_", " "))
    xs, ys = _finite_series(rows, "frac_lmt")
    if xs:
        twin = ax.twinx()
        twin.plot(xs, ys, color="gray", alpha=0.5, label="frac lmt")
        twin.set_ylabel("fraction limited")
        twin.set_ylim(0, 1)
    ax.set_xlabel("step")
    ax.set_ylabel("target components")
    ax.legend(fontsize=8, loc="upper left")
    ax.set_title("imagination vs limitation")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_audit_figure(records: list[dict], path) -> Path:
    """LHS vs RHS scatter per bound plus a margin histogram."""
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))

    ax = axes[0]
    markers = {"thm2": "o", "thm3": "s", "thm4": "^"}
    lo, hi = np.inf, 0.0
    for name, marker in markers.items():
        lhs = np.array([r[f"lhs_{name}"] for r in records])
        rhs = np.array([r[f"rhs_{name}"] for r in records])
        keep = (lhs > 0) | (rhs > 0)
        eps = 1e-12
        ax.scatter(rhs[keep] + eps, lhs[keep] + eps, s=12, marker=marker, alpha=0.6,
                   label=f"bound {name[-1]}")
        if keep.any():
            lo = min(lo, float((lhs[keep] + eps).min()), float((rhs[keep] + eps).min()))
            hi = max(hi, float((lhs[keep] + eps).max()), float((rhs[keep] + eps).max()))
    if not np.isfinite(lo):
        lo, hi = 1e-12, 1.0
    line = np.array([lo, max(hi, lo * 10)])
    ax.plot(line, line, color="black", linewidth=1, linestyle="--", label="lhs = rhs")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("bound (rhs)")
    ax.set_ylabel("measured gap (lhs)")
    ax.legend(fontsize=8)
    ax.set_title("measured gaps vs bounds")

    ax = axes[1]
    margins = []
    for name in markers:
        for r in records:
            rhs, lhs = r[f"rhs_{name}"], r[f"lhs_{name}"]
            if rhs > 0:
                margins.append(lhs / rhs)
    if margins:
        ax.hist(margins, bins=40, color="tab:blue", alpha=0.8)
    ax.axvline(1.0, color="black", linestyle="--", linewidth=1)
    ax.set_xlabel("lhs / rhs")
    ax.set_ylabel("count")
    ax.set_title("bound utilization")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
