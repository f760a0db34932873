"""Training losses and loops for the teacher, the baseline students and GDPD.

A GDPD student trains in two phases split at epoch ``E_warm``:

* warm-up (``ep < E_warm``): the student minimises the task loss on partial
  inputs while, on the same batches, the denoiser learns the distribution of
  the cached teacher features;
* distillation (``ep >= E_warm``): the denoiser is frozen and the student
  (plus fusion adapter) minimises ``lambda_task * task + lambda_kd * gdpd``.

Every source of randomness is an explicit generator derived from the run
seed, so two runs with the same seed produce identical loss logs, and a GDPD
run whose distillation phase contributes nothing reproduces the Base run.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import TimeSeriesDataset
from .diffusion import (DenoiserSpec, FusionAdapter, NoiseSchedule, build_denoiser,
                        diffusion_loss, make_schedule, posterior_sample)
from .metrics import auc_prc
from .models import Classifier, ClassifierSpec, build_classifier, predict

log = logging.getLogger(__name__)

METHODS = ("base", "logit-kd", "feature-kd", "gdpd")


@dataclass(frozen=True)
class TrainSchedule:
    total_epochs: int = 600
    E_warm: int = 300
    lambda_task: float = 1.0
    lambda_kd: float = 1.0
    J: int = 1
    nfe: int = 5
    batch_size: int = 64
    lr: float = 0.01
    lr_decay_factor: float = 0.5
    lr_decay_epochs: tuple = (25, 30, 35)
    seed: int = 0
    temperature: float = 4.0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.E_warm <= self.total_epochs:
            raise ValueError(f"E_warm must lie in 0..total_epochs ({self.total_epochs}), got {self.E_warm}")
        if self.J < 1 or self.batch_size < 1:
            raise ValueError("J and batch_size must be >= 1")
        if self.nfe < 0:
            raise ValueError("nfe must be >= 0 (0 disables GDPD)")
        if self.lambda_task < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "lr_decay_epochs", tuple(self.lr_decay_epochs))


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    shape: str = "linear"
    hidden: int = 256
    time_dim: int = 64
    lr: float = 1e-3

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, self.shape)


def generator(seed: int, stream: int) -> torch.Generator:
    """Independent torch generator for one (seed, purpose) pair."""
    state = np.random.SeedSequence([seed, stream]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


STREAM_SHUFFLE, STREAM_DIFFUSION, STREAM_POSTERIOR = 1, 2, 3


def to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.tensor(np.asarray(x), dtype=torch.float32)


# ---------------------------------------------------------------------------
# losses


def task_loss(student: nn.Module, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(student(x), labels)


def logit_kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                  temperature: float = 4.0) -> torch.Tensor:
    """``tau^2 * KL(p_teacher || p_student)`` on temperature-softened logits, batch mean."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_ps = F.log_softmax(student_logits / temperature, dim=1)
    log_pt = F.log_softmax(teacher_logits / temperature, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1).mean()
    return kl * temperature ** 2


def feature_kd_loss(z_short: torch.Tensor, z_long: torch.Tensor,
                    projection: Optional[nn.Module] = None) -> torch.Tensor:
    """Batch mean of the squared L2 distance (summed over feature dims)."""
    z = projection(z_short) if projection is not None else z_short
    return ((z - z_long) ** 2).sum(dim=1).mean()


def gdpd_loss_from_features(student: Classifier, denoiser, schedule: NoiseSchedule,
                            adapter: FusionAdapter, z_short: torch.Tensor, labels: torch.Tensor,
                            J: int = 1, nfe: int = 5,
                            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if nfe == 0:
        return z_short.new_zeros(())
    total = z_short.new_zeros(())
    for _ in range(J):
        z_long = posterior_sample(denoiser, schedule, adapter, z_short, nfe, generator)
        total = total + F.cross_entropy(student.head(adapter.back_map(z_long)), labels)
    return total / J


def gdpd_loss(student: Classifier, denoiser, schedule: NoiseSchedule, adapter: FusionAdapter,
              x: torch.Tensor, labels: torch.Tensor, J: int = 1, nfe: int = 5,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Cross-entropy of the student head on ``J`` posterior reconstructions of its features.

    ``nfe = 0`` disables the term (returns exactly 0 without sampling).
    """
    if nfe == 0:
        return torch.zeros(())
    return gdpd_loss_from_features(student, denoiser, schedule, adapter, student.features(x),
                                   labels, J, nfe, generator)


# ---------------------------------------------------------------------------
# teacher features


@dataclass(frozen=True, eq=False)
class TeacherFeatureCache:
    """Frozen teacher features and logits for each train sample (full-length inputs)."""

    features: torch.Tensor
    logits: torch.Tensor
    indices: np.ndarray
    layer: int

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@torch.no_grad()
def cache_teacher_features(teacher: Classifier, dataset_full: TimeSeriesDataset,
                           feature_layer: Optional[int] = None, split: str = "train",
                           batch_size: int = 512) -> TeacherFeatureCache:
    layer = feature_layer or teacher.spec.feature_layer
    idx = dataset_full.indices(split)
    x = to_tensor(dataset_full.samples[idx])
    was_training = teacher.training
    teacher.eval()
    feats, logits = [], []
    try:
        for i in range(0, len(x), batch_size):
            layers = teacher.layer_features(x[i:i + batch_size])
            feats.append(layers[layer - 1])
            logits.append(teacher.fc(layers[-1]))
    finally:
        teacher.train(was_training)
    f, lg = torch.cat(feats), torch.cat(logits)
    f.requires_grad_(False)
    return TeacherFeatureCache(features=f, logits=lg, indices=idx, layer=layer)


# ---------------------------------------------------------------------------
# training loop


LOG_FIELDS = ("epoch", "phase", "task_loss", "diffusion_loss", "gdpd_loss", "kd_loss",
              "val_loss", "val_auc_prc", "lr")


@dataclass
class TrainResult:
    model: Classifier
    log: list[dict]
    best_epoch: int
    denoiser: Optional[nn.Module] = None
    adapter: Optional[FusionAdapter] = None
    projection: Optional[nn.Module] = None
    schedule: Optional[NoiseSchedule] = None

    def log_text(self) -> str:
        return format_log(self.log)


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS])
    return buf.getvalue()


@torch.no_grad()
def _validate(model: Classifier, x: torch.Tensor, y: torch.Tensor) -> tuple[float, float]:
    if len(x) == 0:
        return float("nan"), float("nan")
    model.eval()
    logits = model(x)
    model.train()
    loss = float(F.cross_entropy(logits, y))
    try:
        score = auc_prc(torch.softmax(logits, 1).numpy(), y.numpy())
    except ValueError:
        score = float("nan")
    return loss, score


def _split_tensors(dataset: TimeSeriesDataset, split: str):
    x, y = dataset.subset(split)
    return to_tensor(x), torch.as_tensor(y, dtype=torch.long)


StepFn = Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], dict]


def _fit(student: Classifier, dataset: TimeSeriesDataset, schedule: TrainSchedule,
         extra_params: list, step_fn: StepFn, phase_fn: Callable[[int], str],
         on_epoch_end: Optional[Callable[[int], None]] = None) -> TrainResult:
    """Shared epoch loop: shuffling, optimiser, lr decay, validation, best-weights selection.

    ``step_fn(epoch, batch_idx, x, y)`` returns a dict holding the scalar
    ``loss`` to minimise for the student (and any extra params) plus log terms.
    """
    x_tr, y_tr = _split_tensors(dataset, "train")
    x_val, y_val = _split_tensors(dataset, "val")
    if len(x_tr) == 0:
        raise ValueError("train split is empty")
    params = list(student.parameters()) + extra_params
    opt = torch.optim.Adam(params, lr=schedule.lr)
    lr_sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(schedule.lr_decay_epochs),
                                                    gamma=schedule.lr_decay_factor)
    shuffle = generator(schedule.seed, STREAM_SHUFFLE)
    best = (float("inf"), -1, None)
    history = []
    student.train()
    for epoch in range(schedule.total_epochs):
        perm = torch.randperm(len(x_tr), generator=shuffle)
        sums = {"task_loss": 0.0, "diffusion_loss": 0.0, "gdpd_loss": 0.0, "kd_loss": 0.0}
        n_batches = 0
        for start in range(0, len(perm), schedule.batch_size):
            idx = perm[start:start + schedule.batch_size]
            if len(idx) < 2 and len(perm) > 1:
                continue  # a singleton batch breaks batch norm
            opt.zero_grad(set_to_none=True)
            out = step_fn(epoch, idx, x_tr[idx], y_tr[idx])
            out["loss"].backward()
            opt.step()
            for k in sums:
                sums[k] += float(out.get(k, 0.0))
            n_batches += 1
        lr = opt.param_groups[0]["lr"]
        lr_sched.step()
        val_loss, val_score = _validate(student, x_val, y_val)
        row = {"epoch": epoch, "phase": phase_fn(epoch)}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        row.update({"val_loss": val_loss, "val_auc_prc": val_score, "lr": lr})
        history.append(row)
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        # without a validation split the last epoch wins
        key = val_loss if not np.isnan(val_loss) else -epoch
        if key < best[0] or best[2] is None:
            best = (key, epoch, copy.deepcopy(student.state_dict()))
    student.load_state_dict(best[2])
    student.eval()
    return TrainResult(model=student, log=history, best_epoch=best[1])


def train_classifier(spec: ClassifierSpec, dataset: TimeSeriesDataset,
                     schedule: TrainSchedule) -> TrainResult:
    """Plain task-loss training (the Base student, or one teacher candidate)."""
    student = build_classifier(spec, schedule.seed)

    def step(epoch, idx, x, y):
        task = task_loss(student, x, y)
        return {"loss": schedule.lambda_task * task, "task_loss": task.detach()}

    return _fit(student, dataset, schedule, [], step, lambda ep: "task")


def train_teacher(spec: ClassifierSpec, dataset_full: TimeSeriesDataset, schedule: TrainSchedule,
                  n_inits: int = 5) -> tuple[Classifier, list[float]]:
    """Train ``n_inits`` seeds on full sequences; keep the best validation AUC-PRC."""
    candidates = []
    for k in range(n_inits):
        sched = _replace(schedule, seed=schedule.seed + k)
        res = train_classifier(spec, dataset_full, sched)
        x_val, y_val = _split_tensors(dataset_full, "val")
        score = auc_prc(predict(res.model, x_val).numpy(), y_val.numpy()) if len(x_val) else 0.0
        log.info("teacher init %d: val AUC-PRC %.4f", k, score)
        candidates.append((score, k, res.model))
    best = max(candidates, key=lambda c: (c[0], -c[1]))
    teacher = best[2]
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher, [c[0] for c in candidates]


def _replace(schedule: TrainSchedule, **changes) -> TrainSchedule:
    values = {f.name: getattr(schedule, f.name) for f in fields(schedule)}
    values.update(changes)
    return TrainSchedule(**values)


def _check_alignment(dataset: TimeSeriesDataset, cache: TeacherFeatureCache):
    if not np.array_equal(dataset.indices("train"), cache.indices):
        raise ValueError("teacher cache rows do not match the dataset's train split")


def train_student_baseline(student_spec: ClassifierSpec, teacher_cache: Optional[TeacherFeatureCache],
                           dataset_partial: TimeSeriesDataset, method: str,
                           schedule: TrainSchedule) -> TrainResult:
    """Single-phase ``lambda_task * task + lambda_kd * kd`` training for base / logit-kd / feature-kd."""
    if method == "base":
        return train_classifier(student_spec, dataset_partial, schedule)
    if method not in ("logit-kd", "feature-kd"):
        raise ValueError(f"unknown baseline method {method!r}")
    if teacher_cache is None:
        raise ValueError(f"{method} needs a teacher feature cache")
    _check_alignment(dataset_partial, teacher_cache)
    student = build_classifier(student_spec, schedule.seed)
    # map train-split positions to cache rows
    extra, projection = [], None
    if method == "feature-kd" and student_spec.feature_dim != teacher_cache.dim:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(schedule.seed)
            projection = nn.Linear(student_spec.feature_dim, teacher_cache.dim)
        extra = list(projection.parameters())

    def step(epoch, idx, x, y):
        if method == "logit-kd":
            logits = student(x)
            kd = logit_kd_loss(logits, teacher_cache.logits[idx], schedule.temperature)
        else:
            layers = student.layer_features(x)
            logits = student.fc(layers[-1])
            kd = feature_kd_loss(layers[student_spec.feature_layer - 1], teacher_cache.features[idx],
                                 projection)
        task = F.cross_entropy(logits, y)
        loss = schedule.lambda_task * task + schedule.lambda_kd * kd
        return {"loss": loss, "task_loss": task.detach(), "kd_loss": kd.detach()}

    res = _fit(student, dataset_partial, schedule, extra, step, lambda ep: "distill")
    res.projection = projection
    return res


def distill_objective(student: Classifier, denoiser, noise: NoiseSchedule, adapter: FusionAdapter,
                      x: torch.Tensor, y: torch.Tensor, schedule: TrainSchedule,
                      generator: Optional[torch.Generator] = None):
    """Phase-2 loss ``lambda_task * task + lambda_kd * gdpd`` and its two terms."""
    z = student.features(x)
    final_layer = student.spec.feature_layer == student.spec.depth
    logits = student.head(z) if final_layer else student(x)
    task = F.cross_entropy(logits, y)
    g = gdpd_loss_from_features(student, denoiser, noise, adapter, z, y,
                                schedule.J, schedule.nfe, generator)
    return schedule.lambda_task * task + schedule.lambda_kd * g, task, g


def train_student_gdpd(student_spec: ClassifierSpec, teacher_cache: TeacherFeatureCache,
                       dataset_partial: TimeSeriesDataset, schedule: TrainSchedule,
                       diffusion: DiffusionConfig = DiffusionConfig(),
                       callback: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Two-phase GDPD training (see module docstring).

    The teacher cache must come from full-length inputs of the same dataset,
    so that cache row ``i`` is the teacher's view of train sample ``i``.
    ``callback(epoch, modules)`` runs after every epoch.
    """
    _check_alignment(dataset_partial, teacher_cache)
    noise = diffusion.schedule()
    student = build_classifier(student_spec, schedule.seed)
    denoiser = build_denoiser(DenoiserSpec(teacher_cache.dim, diffusion.hidden, diffusion.time_dim),
                              schedule.seed + 1)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(schedule.seed + 2)
        adapter = FusionAdapter(teacher_cache.dim, student_spec.feature_dim)
    den_opt = torch.optim.Adam(denoiser.parameters(), lr=diffusion.lr)
    diff_gen = generator(schedule.seed, STREAM_DIFFUSION)
    post_gen = generator(schedule.seed, STREAM_POSTERIOR)
    frozen = [False]

    def step(epoch, idx, x, y):
        if epoch < schedule.E_warm:
            task = task_loss(student, x, y)
            den_opt.zero_grad(set_to_none=True)
            d_loss = diffusion_loss(denoiser, teacher_cache.features[idx], noise, diff_gen)
            d_loss.backward()
            den_opt.step()
            return {"loss": schedule.lambda_task * task, "task_loss": task.detach(),
                    "diffusion_loss": d_loss.detach()}
        if not frozen[0]:
            denoiser.requires_grad_(False)
            denoiser.eval()
            frozen[0] = True
        loss, task, g = distill_objective(student, denoiser, noise, adapter, x, y, schedule, post_gen)
        return {"loss": loss, "task_loss": task.detach(), "gdpd_loss": g.detach()}

    def end_of_epoch(epoch):
        if callback is not None:
            callback(epoch, {"student": student, "denoiser": denoiser, "adapter": adapter})

    res = _fit(student, dataset_partial, schedule, list(adapter.parameters()), step,
               lambda ep: "warmup" if ep < schedule.E_warm else "distill", end_of_epoch)
    res.denoiser, res.adapter, res.schedule = denoiser, adapter, noise
    return res


def train_student(method: str, student_spec: ClassifierSpec, teacher_cache: Optional[TeacherFeatureCache],
                  dataset_partial: TimeSeriesDataset, schedule: TrainSchedule,
                  diffusion: DiffusionConfig = DiffusionConfig()) -> TrainResult:
    if method == "gdpd":
        return train_student_gdpd(student_spec, teacher_cache, dataset_partial, schedule, diffusion)
    return train_student_baseline(student_spec, teacher_cache, dataset_partial, method, schedule)
