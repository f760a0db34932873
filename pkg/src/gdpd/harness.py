"""Run an experiment config cell by cell, persisting everything under the output dir.

Layout of an output directory::

    config.json                    resolved config (reloaded by `report`/`plot`)
    teachers/<hash>.ckpt|.json     teacher checkpoints, keyed by teacher content hash
    cells/<hash>.json|.ckpt|.tsv   one (variant, dataset, student, method, seed) result
    reports/<variant>/report.csv   per-variant rows and aggregates
    report.csv, aggregate.csv, summary.json

A cell is skipped when its result file exists, so an interrupted run resumes
where it stopped and a finished run re-emits the same report without training.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import data as D
from . import distill as Ds
from .checkpoint import atomic_write
from .config import ExperimentConfig, ModelRef, canonical_json, config_from_dict, stable_hash
from .metrics import REPORT_FIELDS, MetricsReport, aggregate, aggregate_csv, classification_report, report_csv
from .models import Classifier, ClassifierSpec, classifier_from_bytes, classifier_to_bytes, predict, state_checksum
from .transfer import linear_probe_suffix, zero_shot_suffix

log = logging.getLogger(__name__)

EXTRA_FIELDS = ("variant", "student", "earliness", "channel_fraction", "best_epoch",
                "teacher_auc_prc", "linear_probe", "zero_shot")


@dataclass(frozen=True)
class Variant:
    """One sub-experiment: a partialness level plus optional overrides."""

    key: str
    earliness: float
    channel_fraction: float = 1.0
    weak: tuple = (1.0, 0.0)  # teacher data keep fraction, label noise fraction
    schedule: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    layer: int = 0
    transfer: bool = False
    with_teacher_rows: bool = False


def _fmt(v) -> str:
    return f"{v:g}"


def plan_variants(cfg: ExperimentConfig) -> list[Variant]:
    p, sw = cfg.partial, cfg.sweep
    if cfg.mode == "earliness-sweep":
        return [Variant(f"e={_fmt(e)}", e, p.channel_fraction) for e in sw.earliness]
    if cfg.mode == "channel-partial":
        return [Variant(f"e={_fmt(p.earliness)},m={_fmt(m)}", p.earliness, m) for m in sw.channel_fraction]
    if cfg.mode == "compression":
        return [Variant(f"e={_fmt(e)}", e, p.channel_fraction) for e in sw.compression_earliness]
    if cfg.mode == "self-distill":
        return [Variant("e=1", 1.0, 1.0, with_teacher_rows=True)]
    if cfg.mode == "weak-teacher":
        return [Variant(f"WT-{i + 1}", p.earliness, p.channel_fraction, weak=(k, n))
                for i, (k, n) in enumerate(sw.weak_teachers)]
    if cfg.mode == "transferability":
        return [Variant(f"e={_fmt(p.earliness)}", p.earliness, p.channel_fraction, transfer=True)]
    if cfg.mode == "ablation":
        out = []
        for v in cfg.ablation.values:
            name = f"{cfg.ablation.param}={v}"
            kw = {"warmup": {"schedule": {"E_warm": int(v)}},
                  "lambda": {"schedule": {"lambda_kd": float(v)}},
                  "nfe": {"schedule": {"nfe": int(v)}},
                  "J": {"schedule": {"J": int(v)}},
                  "T": {"diffusion": {"T": int(v)}},
                  "layer": {"layer": int(v)}}[cfg.ablation.param]
            out.append(Variant(name, p.earliness, p.channel_fraction, **kw))
        return out
    return [Variant(f"e={_fmt(p.earliness)}", p.earliness, p.channel_fraction)]


# ---------------------------------------------------------------------------
# data


def _resolve_paths(ref) -> tuple[Path, Path]:
    if ref.kind == "files":
        return Path(ref.train), Path(ref.test)
    root = Path(ref.root)
    for base in (root / ref.name, root):
        train, test = base / f"{ref.name}_TRAIN.tsv", base / f"{ref.name}_TEST.tsv"
        if train.exists() and test.exists():
            return train, test
    raise FileNotFoundError(f"dataset {ref.name!r}: no {ref.name}_TRAIN.tsv/_TEST.tsv under {root}")


def load_reference(ref, preprocess) -> D.TimeSeriesDataset:
    """Load, impute, resample, normalize and carve validation for one dataset ref."""
    if ref.kind == "synthetic":
        ds = D.make_synthetic_late_signal(D.SyntheticConfig(**ref.synthetic))
        ds = D.TimeSeriesDataset(ds.samples, ds.labels, ds.class_count, ds.split, ref.name, ds.label_values)
    else:
        train, test = _resolve_paths(ref)
        ds = D.load_split_pair(train, test, ref.format, name=ref.name)
    if ds.observed is not None or np.isnan(ds.samples).any():
        if ds.observed is None:
            ds = ds.with_values(ds.samples, ~np.isnan(ds.samples))
        ds = D.impute_missing(ds)
    length = preprocess.length if preprocess.length != ds.length else None
    ds = D.preprocess(ds, length, preprocess.normalize)
    if preprocess.val_fraction > 0:
        ds = D.carve_validation(ds, preprocess.val_fraction, preprocess.split_seed)
    return ds


# ---------------------------------------------------------------------------
# runner


class Runner:
    def __init__(self, cfg: ExperimentConfig, out: Optional[Path] = None):
        self.cfg = cfg
        self.out = Path(out) if out is not None else cfg.output_path()
        self.trained = 0  # cells trained by this process (for tests and logs)
        self.teachers_trained = 0
        self._data: dict = {}
        self._teachers: dict = {}

    # -- persistence ------------------------------------------------------

    def _write_json(self, path: Path, obj) -> None:
        atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())

    def prepare(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        for sub in ("cells", "teachers", "reports"):
            (self.out / sub).mkdir(exist_ok=True)
        self._write_json(self.out / "config.json", self.cfg.to_dict())

    # -- components -------------------------------------------------------

    def dataset(self, ref) -> D.TimeSeriesDataset:
        if ref.name not in self._data:
            self._data[ref.name] = load_reference(ref, self.cfg.preprocess)
        return self._data[ref.name]

    def teacher_key(self, ref, variant: Variant) -> dict:
        return {"dataset": asdict(ref), "preprocess": asdict(self.cfg.preprocess),
                "teacher": asdict(self.cfg.teacher),
                "schedule": asdict(self.cfg.teacher_schedule or replace(self.cfg.schedule, E_warm=0)),
                "weak": list(variant.weak)}

    def teacher(self, ref, variant: Variant) -> Classifier:
        key = self.teacher_key(ref, variant)
        h = stable_hash(key)
        if h in self._teachers:
            return self._teachers[h]
        path = self.out / "teachers" / f"{h}.ckpt"
        if path.exists():
            teacher = classifier_from_bytes(path.read_bytes())
        else:
            ds = self.dataset(ref)
            keep, noise = variant.weak
            train_ds = D.degrade_supervision(ds, keep, noise, seed=self.cfg.preprocess.split_seed) \
                if (keep, noise) != (1.0, 0.0) else ds
            spec = self.cfg.teacher.resolve(ds.class_count, ds.n_channels)
            spec = replace(spec, feature_layer=spec.depth)
            sched = self.cfg.teacher_schedule or replace(self.cfg.schedule, E_warm=0)
            t0 = time.time()
            teacher, scores = Ds.train_teacher(spec, train_ds, sched, self.cfg.teacher.n_inits)
            atomic_write(path, classifier_to_bytes(teacher))
            self.teachers_trained += 1
            self._write_json(self.out / "teachers" / f"{h}.json",
                             {"key": key, "val_auc_prc": scores, "seconds": round(time.time() - t0, 3)})
        teacher.requires_grad_(False).eval()
        self._teachers[h] = teacher
        return teacher

    def cell_key(self, ref, variant: Variant, student: ModelRef, method: str, seed: int) -> dict:
        sched = replace(self.cfg.schedule, seed=seed, **variant.schedule)
        diff = replace(self.cfg.diffusion, **variant.diffusion)
        return {"teacher": stable_hash(self.teacher_key(ref, variant)), "variant": asdict(variant),
                "partial": asdict(self.cfg.partial), "student": asdict(student), "method": method,
                "schedule": asdict(sched), "diffusion": asdict(diff), "seed": seed}

    def cells(self):
        for variant in plan_variants(self.cfg):
            for ref in self.cfg.datasets:
                for student in self.cfg.students:
                    for method in self.cfg.methods:
                        for seed in self.cfg.seeds:
                            yield variant, ref, student, method, seed

    def run_cell(self, variant: Variant, ref, student: ModelRef, method: str, seed: int) -> dict:
        key = self.cell_key(ref, variant, student, method, seed)
        h = stable_hash(key)
        result_path = self.out / "cells" / f"{h}.json"
        if result_path.exists():
            return json.loads(result_path.read_text())["row"]

        ds = self.dataset(ref)
        teacher = self.teacher(ref, variant)
        pspec = D.PartialnessSpec(variant.earliness, variant.channel_fraction,
                                  self.cfg.partial.channel_rule, self.cfg.partial.channels)
        part = D.apply_partialness(ds, pspec)
        spec = student.resolve(ds.class_count, part.n_channels)
        layer = variant.layer or teacher.spec.depth
        if variant.layer:
            spec = replace(spec, feature_layer=min(variant.layer, spec.depth))
        cache = Ds.cache_teacher_features(teacher, ds, layer) if method != "base" else None
        sched = replace(self.cfg.schedule, seed=seed, **variant.schedule)
        diff = replace(self.cfg.diffusion, **variant.diffusion)

        t0 = time.time()
        res = Ds.train_student(method, spec, cache, part, sched, diff)
        seconds = time.time() - t0

        x_full, y = ds.subset("test")
        teacher_probs = predict(teacher, Ds.to_tensor(x_full)).numpy()
        x_part, _ = part.subset("test")
        probs = predict(res.model, Ds.to_tensor(x_part)).numpy()
        metrics = classification_report(probs, y, teacher_probs.argmax(1))
        row = {"dataset": ref.name, "method": method, "seed": seed, **metrics,
               "variant": variant.key, "student": student.label, "earliness": variant.earliness,
               "channel_fraction": variant.channel_fraction, "best_epoch": res.best_epoch,
               "teacher_auc_prc": classification_report(teacher_probs, y)["auc_prc"]}
        record = {"key": key, "row": row, "seconds": round(seconds, 3)}
        if variant.transfer:
            frac = self.cfg.sweep.transfer_fraction
            full_channels = D.mask_channels(ds, pspec)
            before = state_checksum(res.model)
            row["linear_probe"] = linear_probe_suffix(res.model, full_channels, frac)
            row["zero_shot"] = zero_shot_suffix(res.model, full_channels, frac)
            record["probe_checksums"] = [before, state_checksum(res.model)]

        atomic_write(self.out / "cells" / f"{h}.ckpt", classifier_to_bytes(res.model))
        atomic_write(self.out / "cells" / f"{h}.tsv", res.log_text().encode())
        self._write_json(result_path, record)
        self.trained += 1
        log.info("%s %s %s %s seed=%d auc_prc=%.4f (%.1fs)", variant.key, ref.name, student.label,
                 method, seed, row["auc_prc"], seconds)
        return row

    def teacher_rows(self, variant: Variant, ref) -> list[dict]:
        ds = self.dataset(ref)
        teacher = self.teacher(ref, variant)
        x, y = ds.subset("test")
        probs = predict(teacher, Ds.to_tensor(x)).numpy()
        metrics = classification_report(probs, y, probs.argmax(1))
        return [{"dataset": ref.name, "method": "teacher", "seed": s, **metrics, "variant": variant.key,
                 "student": self.cfg.teacher.label, "earliness": 1.0, "channel_fraction": 1.0,
                 "teacher_auc_prc": metrics["auc_prc"]} for s in self.cfg.seeds]

    def run(self) -> dict[str, MetricsReport]:
        self.prepare()
        rows = [self.run_cell(*cell) for cell in self.cells()]
        for variant in plan_variants(self.cfg):
            if variant.with_teacher_rows:
                for ref in self.cfg.datasets:
                    rows.extend(self.teacher_rows(variant, ref))
        return write_reports(self.out, self.cfg, rows)


def run(cfg: ExperimentConfig, out: Optional[Path] = None) -> dict[str, MetricsReport]:
    return Runner(cfg, out).run()


# ---------------------------------------------------------------------------
# reports


def _method_key(row: dict, multi_student: bool) -> str:
    if row["method"] == "teacher" or not multi_student:
        return row["method"]
    return f"{row['student']}/{row['method']}"


def write_reports(out: Path, cfg: ExperimentConfig, rows: list[dict]) -> dict[str, MetricsReport]:
    """Aggregate per variant and write report.csv / aggregate.csv / summary.json."""
    multi = len(cfg.students) > 1
    order = [v.key for v in plan_variants(cfg)]
    reports, summary = {}, {"name": cfg.name, "mode": cfg.mode, "variants": {}}
    extra = [f for f in EXTRA_FIELDS if any(f in r for r in rows)]
    for vkey in order:
        vrows = [dict(r, method=_method_key(r, multi)) for r in rows if r["variant"] == vkey]
        if not vrows:
            continue
        reference = next((m for m in (_method_key({"method": "gdpd", "student": s.label}, multi)
                                      for s in cfg.students) if any(r["method"] == m for r in vrows)), None)
        rep = aggregate(vrows, "auc_prc", reference=reference)
        reports[vkey] = rep
        vdir = out / "reports" / _safe(vkey)
        vdir.mkdir(parents=True, exist_ok=True)
        atomic_write(vdir / "report.csv", report_csv(rep, extra).encode())
        atomic_write(vdir / "aggregate.csv", aggregate_csv(rep).encode())
        summary["variants"][vkey] = {
            "methods": {m: asdict(s) for m, s in sorted(rep.methods.items())},
            "pairwise": rep.pairwise, "vs_all": rep.vs_all, "reference": rep.reference}
        for extra_metric in ("linear_probe", "zero_shot"):
            vals = {}
            for r in vrows:
                if r.get(extra_metric) is not None:
                    vals.setdefault(r["method"], []).append(r[extra_metric])
            if vals:
                summary["variants"][vkey][extra_metric] = {m: float(np.mean(v)) for m, v in sorted(vals.items())}
    all_rows = [dict(r, method=_method_key(r, multi)) for r in rows]
    flat = MetricsReport(rows=sorted(all_rows, key=lambda r: (order.index(r["variant"]), r["dataset"],
                                                              r["method"], r["seed"])))
    atomic_write(out / "report.csv", _rows_csv(flat.rows, extra).encode())
    if len(order) == 1 and order[0] in reports:
        atomic_write(out / "aggregate.csv", aggregate_csv(reports[order[0]]).encode())
    atomic_write(out / "summary.json", (json.dumps(summary, indent=1, sort_keys=True) + "\n").encode())
    return reports


def _rows_csv(rows: list[dict], extra) -> str:
    import csv
    import io
    fields = list(REPORT_FIELDS) + [f for f in extra if f not in REPORT_FIELDS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(f) is None else (f"{r[f]:.6f}" if isinstance(r[f], float) else r[f])
                    for f in fields])
    return buf.getvalue()


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "=.,-_" else "_" for c in name)


def load_output(out: Path) -> tuple[ExperimentConfig, list[dict]]:
    """Reload a config and every finished cell row from an output directory."""
    out = Path(out)
    cfg_path = out / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{out} has no config.json (not an experiment output directory)")
    cfg = config_from_dict(json.loads(cfg_path.read_text()))
    runner = Runner(cfg, out)
    rows, missing = [], 0
    for cell in runner.cells():
        h = stable_hash(runner.cell_key(cell[1], cell[0], *cell[2:]))
        p = out / "cells" / f"{h}.json"
        if p.exists():
            rows.append(json.loads(p.read_text())["row"])
        else:
            missing += 1
    if missing:
        log.warning("%d of %d cells have no result yet", missing, missing + len(rows))
    return cfg, rows


def report(out: Path) -> dict[str, MetricsReport]:
    """Rebuild the reports of an output directory from its finished cells (no training)."""
    cfg, rows = load_output(out)
    runner = Runner(cfg, out)
    for variant in plan_variants(cfg):
        if variant.with_teacher_rows:
            for ref in cfg.datasets:
                try:
                    rows.extend(runner.teacher_rows(variant, ref))
                except FileNotFoundError:
                    pass
    return write_reports(Path(out), cfg, rows)


def format_summary(reports: dict[str, MetricsReport]) -> str:
    lines = []
    for vkey, rep in reports.items():
        lines.append(f"[{vkey}]")
        lines.append(f"  {'method':<24} {'auc_prc':>8} {'rank':>6} {'top1':>5} {'fidelity':>9}")
        for m, s in sorted(rep.methods.items(), key=lambda kv: kv[1].avg_rank):
            fid = "" if s.avg_fidelity is None else f"{s.avg_fidelity:.4f}"
            lines.append(f"  {m:<24} {s.avg_score:>8.4f} {s.avg_rank:>6.2f} {s.num_top1:>5d} {fid:>9}")
        if rep.reference:
            rec = rep.vs_all
            lines.append(f"  {rep.reference} vs all: {rec['wins']}W/{rec['draws']}D/{rec['losses']}L")
    return "\n".join(lines)
