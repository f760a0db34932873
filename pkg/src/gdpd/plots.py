"""Figures from a finished report: fidelity bars, AUC-PRC vs earliness, weak-teacher curves."""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

# PNG metadata otherwise carries the matplotlib version string
_META = {"Software": None}


def _means(rows, metric):
    acc = defaultdict(list)
    for r in rows:
        if r.get(metric) not in (None, ""):
            acc[(r["variant"], r["method"])].append(float(r[metric]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def _ordered(values):
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return path


def fidelity_bars(rows, path: Path):
    return _save(fidelity_figure(rows), path)


def fidelity_figure(rows):
    """Grouped bars: one group per variant, one bar per method."""
    means = _means(rows, "fidelity")
    variants = _ordered(r["variant"] for r in rows)
    methods = _ordered(r["method"] for r in rows if r["method"] != "teacher")
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(variants), 3.2))
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(variants))
    for i, m in enumerate(methods):
        ax.bar(x + (i - (len(methods) - 1) / 2) * width,
               [means.get((v, m), np.nan) for v in variants], width, label=m)
    ax.set_xticks(x, variants)
    ax.set_ylim(0, 1)
    ax.set_ylabel("top-1 agreement with teacher")
    ax.legend(fontsize="small")
    fig.tight_layout()
    return fig


def metric_lines(rows, path: Path, xs, xlabel: str, metric: str = "auc_prc"):
    """One line per method across the variants, placed at the given x values."""
    means = _means(rows, metric)
    variants = _ordered(r["variant"] for r in rows)
    methods = _ordered(r["method"] for r in rows if r["method"] != "teacher")
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for m in methods:
        ax.plot(xs, [means.get((v, m), np.nan) for v in variants], marker="o", label=m)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(metric.replace("_", "-").upper())
    ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(rows: list[dict], out_dir: Path, mode: str = "standard") -> list[Path]:
    """Write the figures that apply to ``mode``; returns the paths written."""
    rows = [r for r in rows if r.get("method")]
    if not rows:
        warnings.warn("report has no methods; no plots written", stacklevel=2)
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if any(r.get("fidelity") not in (None, "") for r in rows):
        paths.append(fidelity_bars(rows, out_dir / "fidelity.png"))
    variants = _ordered(r["variant"] for r in rows)
    if mode == "earliness-sweep":
        first = {r["variant"]: float(r["earliness"]) for r in rows}
        paths.append(metric_lines(rows, out_dir / "auc_prc_vs_earliness.png",
                                  [first[v] for v in variants], "earliness (fraction of L)"))
    if mode == "weak-teacher":
        paths.append(metric_lines(rows, out_dir / "weak_teacher.png", list(range(1, len(variants) + 1)),
                                  "weak-teacher level"))
    return paths
