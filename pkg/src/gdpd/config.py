"""Experiment configuration: YAML schema, validation and stable hashing.

A config file is a nested mapping. Unknown keys anywhere are rejected and all
problems are reported together, before any training starts::

    name: synthetic-demo
    mode: standard            # see MODES
    output_dir: runs/demo     # relative paths honour $GDPD_OUTPUT_ROOT
    seeds: [0, 1, 2, 3, 4]
    methods: [base, gdpd]
    datasets:
      - {name: synth, kind: synthetic, synthetic: {N: 600, L: 100}}
      - {name: GunPoint, kind: ucr, root: /data/UCR}
      - {name: mine, kind: files, train: a.tsv, test: b.tsv}
    preprocess: {length: 100, normalize: per-series, val_fraction: 0.2}
    teacher: {model: LSTM3-100, n_inits: 5}
    students: [LSTM3-100]
    partial: {earliness: 0.5, channel_fraction: 1.0}
    schedule: {total_epochs: 600, E_warm: 300}
    diffusion: {T: 1000}
    sweep: {earliness: [0.2, 0.4, 0.5, 0.6, 0.8, 1.0]}
    ablation: {param: nfe, values: [0, 1, 5]}
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import SyntheticConfig
from .distill import METHODS, DiffusionConfig, TrainSchedule
from .models import FAMILIES, ClassifierSpec, parse_model_name

MODES = ("standard", "earliness-sweep", "channel-partial", "compression", "self-distill",
         "weak-teacher", "transferability", "ablation")
ABLATIONS = ("warmup", "lambda", "T", "nfe", "J", "layer")
OUTPUT_ROOT_ENV = "GDPD_OUTPUT_ROOT"

DEFAULT_EARLINESS = (0.2, 0.4, 0.5, 0.6, 0.8, 1.0)
DEFAULT_WEAK_TEACHERS = ((1.0, 0.0), (0.75, 0.0), (0.75, 0.1), (0.5, 0.25))


class ConfigError(ValueError):
    """Validation failure; ``problems`` lists every offending field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class DatasetRef:
    name: str
    kind: str = "synthetic"  # synthetic | ucr | files
    root: Optional[str] = None
    train: Optional[str] = None
    test: Optional[str] = None
    format: str = "delimited-label-first"
    synthetic: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Preprocess:
    length: Optional[int] = 100
    normalize: Optional[str] = "per-series"
    val_fraction: float = 0.2
    split_seed: int = 0


@dataclass(frozen=True)
class ModelRef:
    """A classifier named like ``LSTM3-100`` or given by family/depth/width."""

    model: Optional[str] = None
    family: Optional[str] = None
    depth: Optional[int] = None
    width: Optional[int] = None
    feature_layer: int = 0

    def resolve(self, class_count: int, input_channels: int) -> ClassifierSpec:
        if self.model is not None:
            spec = parse_model_name(self.model, class_count, input_channels)
            return ClassifierSpec(spec.family, spec.depth, spec.width, class_count, input_channels,
                                  self.feature_layer)
        return ClassifierSpec(self.family, self.depth, self.width, class_count, input_channels,
                              self.feature_layer)

    @property
    def label(self) -> str:
        return self.model or f"{self.family}{self.depth}-{self.width}"


@dataclass(frozen=True)
class TeacherRef(ModelRef):
    n_inits: int = 5


@dataclass(frozen=True)
class PartialRef:
    earliness: float = 0.5
    channel_fraction: float = 1.0
    channel_rule: str = "keep-first-k"
    channels: Optional[tuple] = None


@dataclass(frozen=True)
class Sweep:
    earliness: tuple = DEFAULT_EARLINESS
    channel_fraction: tuple = (1.0, 0.5)
    compression_earliness: tuple = (0.5, 1.0)
    weak_teachers: tuple = DEFAULT_WEAK_TEACHERS
    transfer_fraction: float = 0.5


@dataclass(frozen=True)
class Ablation:
    param: str
    values: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    mode: str
    output_dir: str
    seeds: tuple
    methods: tuple
    datasets: tuple
    teacher: TeacherRef
    students: tuple
    preprocess: Preprocess = Preprocess()
    partial: PartialRef = PartialRef()
    schedule: TrainSchedule = TrainSchedule()
    teacher_schedule: Optional[TrainSchedule] = None
    diffusion: DiffusionConfig = DiffusionConfig()
    sweep: Sweep = Sweep()
    ablation: Optional[Ablation] = None

    def output_path(self) -> Path:
        path = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        return path

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return stable_hash(self.to_dict())


# ---------------------------------------------------------------------------
# hashing


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def canonical_json(value) -> str:
    return json.dumps(_plain(value), sort_keys=True, separators=(",", ":"))


def stable_hash(value, length: int = 16) -> str:
    """Hash of the canonical JSON form; key order does not matter."""
    return hashlib.sha256(canonical_json(value).encode()).hexdigest()[:length]


# ---------------------------------------------------------------------------
# parsing


TOP_KEYS = {f.name for f in fields(ExperimentConfig)}
REQUIRED = ("name", "mode", "output_dir", "seeds", "methods", "datasets", "teacher")


def _section(raw, cls, where: str, problems: list, extra_ok: tuple = ()):
    """Build dataclass ``cls`` from mapping ``raw``; unknown keys become problems."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a mapping")
        return None
    known = {f.name for f in fields(cls)} | set(extra_ok)
    for k in sorted(set(raw) - known):
        problems.append(f"{where}.{k}: unknown key")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in raw.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        problems.append(f"{where}: {err}")
        return None


def _model_ref(raw, where: str, problems: list, cls=ModelRef):
    if isinstance(raw, str):
        raw = {"model": raw}
    ref = _section(raw, cls, where, problems)
    if ref is None:
        return None
    try:
        if ref.model is None and None in (ref.family, ref.depth, ref.width):
            raise ValueError("give either 'model' or all of family/depth/width")
        if ref.family is not None and ref.family not in FAMILIES:
            raise ValueError(f"unknown family {ref.family!r}")
        ref.resolve(2, 1)
    except ValueError as err:
        problems.append(f"{where}: {err}")
        return None
    return ref


def parse_config(raw: Any) -> ExperimentConfig:
    """Validate a raw mapping; raise :class:`ConfigError` listing every problem."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config: expected a mapping at the top level"])
    for k in sorted(set(raw) - TOP_KEYS):
        problems.append(f"{k}: unknown key")
    for k in REQUIRED:
        if k not in raw:
            problems.append(f"{k}: required")

    mode = raw.get("mode")
    if "mode" in raw and mode not in MODES:
        problems.append(f"mode: must be one of {', '.join(MODES)}")

    seeds = raw.get("seeds", [])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds: need a non-empty list of integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds: must be distinct")

    methods = raw.get("methods", [])
    if not isinstance(methods, list) or not methods:
        problems.append("methods: need a non-empty list")
    else:
        bad = [m for m in methods if m not in METHODS]
        if bad:
            problems.append(f"methods: unknown {bad}; choose from {list(METHODS)}")
        if len(set(methods)) != len(methods):
            problems.append("methods: must be distinct")

    datasets = []
    raw_ds = raw.get("datasets", [])
    if not isinstance(raw_ds, list) or not raw_ds:
        problems.append("datasets: need a non-empty list")
    else:
        for i, d in enumerate(raw_ds):
            ref = _section(d, DatasetRef, f"datasets[{i}]", problems)
            if ref is None:
                continue
            where = f"datasets[{i}]"
            if ref.kind == "synthetic":
                _section(ref.synthetic, SyntheticConfig, f"{where}.synthetic", problems)
            elif ref.kind == "ucr":
                if not ref.root:
                    problems.append(f"{where}.root: required for kind 'ucr'")
            elif ref.kind == "files":
                if not (ref.train and ref.test):
                    problems.append(f"{where}: kind 'files' needs 'train' and 'test'")
            else:
                problems.append(f"{where}.kind: must be synthetic, ucr or files")
            datasets.append(ref)
        names = [d.name for d in datasets]
        if len(set(names)) != len(names):
            problems.append("datasets: names must be distinct")

    teacher = _model_ref(raw.get("teacher"), "teacher", problems, TeacherRef) if "teacher" in raw else None
    if teacher is not None and teacher.n_inits < 1:
        problems.append("teacher.n_inits: must be >= 1")
    if "students" in raw:
        raw_students = raw["students"]
        if not isinstance(raw_students, list) or not raw_students:
            problems.append("students: need a non-empty list")
            raw_students = []
        students = [_model_ref(s, f"students[{i}]", problems) for i, s in enumerate(raw_students)]
    else:
        students = [_as_student(teacher)] if teacher is not None else []

    preprocess = _section(raw.get("preprocess"), Preprocess, "preprocess", problems)
    if preprocess is not None:
        if preprocess.normalize not in (None, "per-series", "train-set"):
            problems.append("preprocess.normalize: must be per-series, train-set or null")
        if not 0 <= preprocess.val_fraction < 1:
            problems.append("preprocess.val_fraction: must lie in [0, 1)")
    partial = _section(raw.get("partial"), PartialRef, "partial", problems)
    schedule = _section(raw.get("schedule"), TrainSchedule, "schedule", problems)
    teacher_schedule = (_section(raw["teacher_schedule"], TrainSchedule, "teacher_schedule", problems)
                        if raw.get("teacher_schedule") is not None else None)
    diffusion = _section(raw.get("diffusion"), DiffusionConfig, "diffusion", problems)
    if diffusion is not None:
        try:
            diffusion.schedule()
        except ValueError as err:
            problems.append(f"diffusion: {err}")
    sweep = _section(raw.get("sweep"), Sweep, "sweep", problems)
    if sweep is not None:
        for key in ("earliness", "channel_fraction", "compression_earliness"):
            vals = getattr(sweep, key)
            if not vals or not all(isinstance(v, (int, float)) and 0 < v <= 1 for v in vals):
                problems.append(f"sweep.{key}: need fractions in (0, 1]")
        try:
            sweep = Sweep(**{**asdict(sweep), "weak_teachers": tuple(tuple(w) for w in sweep.weak_teachers)})
            for keep, noise in sweep.weak_teachers:
                if not (0 < keep <= 1 and 0 <= noise < 1):
                    raise ValueError
        except (TypeError, ValueError):
            problems.append("sweep.weak_teachers: need [keep, noise] pairs with keep in (0, 1], noise in [0, 1)")

    ablation = None
    if mode == "ablation":
        ablation = _section(raw.get("ablation"), Ablation, "ablation", problems)
        if "ablation" not in raw:
            problems.append("ablation: required when mode is 'ablation'")
        elif ablation is not None:
            if ablation.param not in ABLATIONS:
                problems.append(f"ablation.param: must be one of {', '.join(ABLATIONS)}")
            if not ablation.values:
                problems.append("ablation.values: need a non-empty list")
            if methods and isinstance(methods, list) and "gdpd" not in methods:
                problems.append("methods: ablation mode needs 'gdpd'")
    elif "ablation" in raw and raw["ablation"] is not None:
        problems.append("ablation: only allowed when mode is 'ablation'")

    if mode in ("compression", "self-distill") and teacher is not None and all(students):
        same = [s.resolve(2, 1) == _as_student(teacher).resolve(2, 1) for s in students]
        if mode == "compression" and any(same):
            problems.append("students: compression mode needs students that differ from the teacher")
        if mode == "self-distill" and not all(same):
            problems.append("students: self-distill mode needs students identical to the teacher")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        name=str(raw["name"]), mode=mode, output_dir=str(raw["output_dir"]), seeds=tuple(seeds),
        methods=tuple(methods), datasets=tuple(datasets), teacher=teacher, students=tuple(students),
        preprocess=preprocess, partial=partial, schedule=schedule, teacher_schedule=teacher_schedule,
        diffusion=diffusion, sweep=sweep, ablation=ablation)


def _as_student(teacher: TeacherRef) -> ModelRef:
    return ModelRef(teacher.model, teacher.family, teacher.depth, teacher.width, teacher.feature_layer)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as err:
        raise ConfigError([f"{path}: {err.strerror or err}"]) from err
    except yaml.YAMLError as err:
        raise ConfigError([f"{path}: not valid YAML ({err})"]) from err
    return parse_config(raw)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_dict` (used when reloading an output dir)."""
    d = dict(d)
    d["teacher"] = {k: v for k, v in d["teacher"].items() if v is not None}
    d["students"] = [{k: v for k, v in s.items() if v is not None} for s in d["students"]]
    d["datasets"] = [{k: v for k, v in x.items() if v is not None} for x in d["datasets"]]
    if d.get("ablation") is None:
        d.pop("ablation", None)
    return parse_config(d)
