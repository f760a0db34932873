"""Classification metrics, fidelity and cross-dataset aggregation."""

from __future__ import annotations

import csv
import io
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class AggregationError(ValueError):
    pass


def _as_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2:
        raise ValueError("scores must be [N] or [N, C]")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s


def average_precision(score: np.ndarray, positive: np.ndarray) -> float:
    """Step-wise ``sum (R_k - R_{k-1}) P_k`` over distinct thresholds, highest first."""
    order = np.argsort(-score, kind="mergesort")
    s, pos = score[order], positive[order].astype(np.float64)
    tp = np.cumsum(pos)
    # keep the last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_area(score: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney U statistic normalised to [0, 1] (midranks for ties)."""
    ranks = rankdata(score)
    n_pos = positive.sum()
    n_neg = len(score) - n_pos
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _one_vs_rest(scores, labels, fn, need_negatives: bool) -> float:
    s = _as_scores(scores)
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != len(s) or len(y) == 0:
        raise ValueError("scores and labels must be non-empty and aligned")
    if s.shape[1] == 1:
        pos = y == 1
        if not pos.any() or (need_negatives and pos.all()):
            raise ValueError("binary scores need both classes present")
        return fn(s[:, 0], pos)
    values = []
    for c in range(s.shape[1]):
        pos = y == c
        if not pos.any() or (need_negatives and pos.all()):
            warnings.warn(f"class {c} absent from labels; excluded from macro average", stacklevel=3)
            continue
        values.append(fn(s[:, c], pos))
    if not values:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(values))


def auc_prc(scores, labels) -> float:
    """Macro one-vs-rest average precision (single-column scores: positive class 1)."""
    return _one_vs_rest(scores, labels, average_precision, need_negatives=False)


def auc_roc(scores, labels) -> float:
    """Macro one-vs-rest ROC area via the rank statistic."""
    return _one_vs_rest(scores, labels, roc_area, need_negatives=True)


def accuracy(scores, labels) -> float:
    s = _as_scores(scores)
    pred = (s[:, 0] > 0.5).astype(int) if s.shape[1] == 1 else s.argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def top1_agreement(student_top1, teacher_top1) -> float:
    a, b = np.asarray(student_top1), np.asarray(teacher_top1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty prediction vectors")
    return float(np.mean(a == b))


def classification_report(probs, labels, teacher_top1=None) -> dict:
    probs = np.asarray(probs, dtype=np.float64)
    out = {"auc_prc": auc_prc(probs, labels), "auc_roc": auc_roc(probs, labels),
           "accuracy": accuracy(probs, labels)}
    if teacher_top1 is not None:
        out["fidelity"] = top1_agreement(probs.argmax(axis=1), teacher_top1)
    return out


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MethodSummary:
    avg_score: float
    avg_rank: float
    num_top1: int
    num_top3: int
    avg_fidelity: Optional[float] = None


@dataclass
class MetricsReport:
    """Per-(dataset, method, seed) rows plus per-method aggregates."""

    rows: list[dict]
    methods: dict[str, MethodSummary] = field(default_factory=dict)
    pairwise: dict[str, dict[str, int]] = field(default_factory=dict)
    vs_all: dict[str, int] = field(default_factory=dict)
    reference: Optional[str] = None
    ranks: dict = field(default_factory=dict)  # (dataset, method) -> rank


def _cell_means(rows: Sequence[dict], metric: str):
    acc = defaultdict(list)
    for r in rows:
        if r.get(metric) is not None:
            acc[(r["dataset"], r["method"])].append(float(r[metric]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def aggregate(rows: Sequence[dict], metric: str = "auc_prc", reference: Optional[str] = None,
              methods: Optional[Sequence[str]] = None) -> MetricsReport:
    """Average seeds per cell, rank per dataset (ties share the mean rank), count wins.

    ``reference`` (e.g. ``"gdpd"``) gets pairwise win/draw/loss counts against
    every other method, and a vs-all record: a win when it is strictly best on a
    dataset, a draw when it ties for best, otherwise a loss.
    """
    rows = list(rows)
    cells = _cell_means(rows, metric)
    datasets = sorted({r["dataset"] for r in rows})
    methods = sorted(methods or {r["method"] for r in rows})
    missing = [(d, m) for d in datasets for m in methods if (d, m) not in cells]
    if missing:
        gaps = ", ".join(f"{d}/{m}" for d, m in missing)
        raise AggregationError(f"missing results for {gaps}")
    fid = _cell_means(rows, "fidelity")

    ranks = {}
    for d in datasets:
        vals = np.array([cells[(d, m)] for m in methods])
        for m, rk in zip(methods, rankdata(-vals, method="average")):
            ranks[(d, m)] = float(rk)

    report = MetricsReport(rows=rows, reference=reference, ranks=ranks)
    for m in methods:
        scores = [cells[(d, m)] for d in datasets]
        better = [sum(cells[(d, o)] > cells[(d, m)] for o in methods) for d in datasets]
        fids = [fid[(d, m)] for d in datasets if (d, m) in fid]
        report.methods[m] = MethodSummary(
            avg_score=float(np.mean(scores)),
            avg_rank=float(np.mean([ranks[(d, m)] for d in datasets])),
            num_top1=sum(b == 0 for b in better),
            num_top3=sum(b < 3 for b in better),
            avg_fidelity=float(np.mean(fids)) if len(fids) == len(datasets) else None)

    if reference is not None:
        if reference not in methods:
            raise AggregationError(f"reference method {reference!r} has no results")
        for o in methods:
            if o == reference:
                continue
            w = dr = l = 0
            for d in datasets:
                a, b = cells[(d, reference)], cells[(d, o)]
                w, dr, l = (w + 1, dr, l) if a > b else (w, dr + 1, l) if a == b else (w, dr, l + 1)
            report.pairwise[o] = {"wins": w, "draws": dr, "losses": l}
        rec = {"wins": 0, "draws": 0, "losses": 0}
        for d in datasets:
            ref = cells[(d, reference)]
            others = [cells[(d, o)] for o in methods if o != reference]
            best = max(others) if others else -np.inf
            key = "wins" if ref > best else "draws" if ref == best else "losses"
            rec[key] += 1
        report.vs_all = rec
    return report


REPORT_FIELDS = ("dataset", "method", "seed", "auc_prc", "auc_roc", "accuracy", "fidelity")


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def report_csv(report: MetricsReport, extra: Iterable[str] = ()) -> str:
    fields = list(REPORT_FIELDS) + [e for e in extra if e not in REPORT_FIELDS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in sorted(report.rows, key=lambda r: (r["dataset"], r["method"], r["seed"])):
        w.writerow([_fmt(r.get(f)) for f in fields])
    return buf.getvalue()


def aggregate_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "auc_prc", "fidelity", "avg_rank", "num_top1", "num_top3",
                "wins", "draws", "losses"])
    for m, s in sorted(report.methods.items()):
        pw = report.pairwise.get(m, {})
        w.writerow([m, _fmt(s.avg_score), _fmt(s.avg_fidelity), _fmt(s.avg_rank), s.num_top1,
                    s.num_top3, pw.get("wins", ""), pw.get("draws", ""), pw.get("losses", "")])
    return buf.getvalue()


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = {}
            for k, v in r.items():
                if k in ("dataset", "method"):
                    out[k] = v
                elif k == "seed":
                    out[k] = int(v)
                elif v == "":
                    out[k] = None
                else:
                    try:
                        out[k] = float(v)
                    except ValueError:
                        out[k] = v  # text columns such as a variant label
            rows.append(out)
    return rows
