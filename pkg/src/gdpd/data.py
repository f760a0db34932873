"""Time-series classification datasets: loading, preprocessing and degradation.

Every operation returns a new :class:`TimeSeriesDataset`; arrays are stored
read-only so a dataset can be shared freely between experiments.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Base class for dataset construction problems."""


class ParseError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class ImputationError(DatasetError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """Labeled multichannel sequences ``samples[N, M, L]`` with split tags.

    ``observed`` is an optional boolean mask of the same shape as ``samples``
    (True where a value was measured); it is only consulted by
    :func:`impute_missing`.
    """

    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    split: np.ndarray
    name: str = "dataset"
    label_values: tuple = ()
    observed: Optional[np.ndarray] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 3:
            raise SchemaError(f"samples must be [N, M, L], got shape {samples.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        split = np.asarray(self.split, dtype="<U5")
        n = samples.shape[0]
        if labels.shape != (n,) or split.shape != (n,):
            raise SchemaError("labels and split must have one entry per sample")
        if self.class_count < 1:
            raise SchemaError("class_count must be >= 1")
        if n and (labels.min() < 0 or labels.max() >= self.class_count):
            raise SchemaError(f"labels must lie in 0..{self.class_count - 1}")
        bad = set(np.unique(split)) - set(SPLITS)
        if bad:
            raise SchemaError(f"unknown split tags {sorted(bad)}")
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "split", _frozen(split))
        if self.observed is not None:
            obs = np.asarray(self.observed, dtype=bool)
            if obs.shape != samples.shape:
                raise SchemaError("observed mask must match samples shape")
            object.__setattr__(self, "observed", _frozen(obs))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def length(self) -> int:
        return self.samples.shape[2]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(samples, labels)`` restricted to one split."""
        idx = self.indices(split)
        return self.samples[idx], self.labels[idx]

    def take(self, idx: np.ndarray) -> "TimeSeriesDataset":
        idx = np.asarray(idx, dtype=np.int64)
        obs = None if self.observed is None else self.observed[idx]
        return replace(self, samples=self.samples[idx], labels=self.labels[idx],
                       split=self.split[idx], observed=obs)

    def with_values(self, samples: np.ndarray, observed: Optional[np.ndarray] = None,
                    **changes) -> "TimeSeriesDataset":
        return replace(self, samples=samples, observed=observed, **changes)


@dataclass(frozen=True)
class PartialnessSpec:
    """The student's degraded view: keep a prefix fraction and a channel fraction."""

    earliness: float = 1.0
    channel_fraction: float = 1.0
    channel_rule: str = "keep-first-k"
    channels: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        for attr in ("earliness", "channel_fraction"):
            v = getattr(self, attr)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{attr} must lie in (0, 1], got {v}")
        if self.channel_rule not in ("keep-first-k", "keep-explicit-list"):
            raise ValueError(f"unknown channel_rule {self.channel_rule!r}")
        if self.channel_rule == "keep-explicit-list" and not self.channels:
            raise ValueError("keep-explicit-list requires a channel list")

    def prefix_length(self, length: int) -> int:
        return fraction_count(self.earliness, length)

    def channel_count(self, n_channels: int) -> int:
        if self.channel_rule == "keep-explicit-list":
            return len(self.channels)
        return fraction_count(self.channel_fraction, n_channels)


def fraction_count(fraction: float, size: int) -> int:
    # small epsilon so that e.g. 0.6 * 100 is not floored to 59
    return max(1, int(math.floor(fraction * size + 1e-9)))


# ---------------------------------------------------------------------------
# delimited text I/O


def _sniff_delimiter(line: str) -> Optional[str]:
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def _parse_rows(text: str, path) -> list[list[float]]:
    rows = []
    delim = None
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        if delim is None:
            delim = _sniff_delimiter(line)
        fields = line.split(delim) if delim else line.split()
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ParseError(f"{path}: row {len(rows)} (line {lineno + 1}) has a non-numeric field") from None
    return rows


def _encode_labels(raw: np.ndarray, label_values: Optional[Sequence[float]]):
    if label_values is None:
        label_values = tuple(float(v) for v in np.unique(raw))
    lookup = {float(v): i for i, v in enumerate(label_values)}
    try:
        labels = np.array([lookup[float(v)] for v in raw], dtype=np.int64)
    except KeyError as exc:
        raise SchemaError(f"label {exc.args[0]} not in label vocabulary") from None
    return labels, tuple(label_values)


def load_dataset(path, format: str = "delimited-label-first", split: str = "train",
                 name: Optional[str] = None, label_values: Optional[Sequence[float]] = None
                 ) -> TimeSeriesDataset:
    """Parse a delimited text file (tab or comma) into a dataset.

    ``delimited-label-first``: one univariate sample per row, ``label, x_1 .. x_L``.
    ``delimited-multichannel``: one (sample, channel) pair per row,
    ``sample_idx, channel_idx, label, x_1 .. x_L``.

    Raw labels are mapped to ids through ``label_values`` (sorted unique raw
    labels when omitted); pass the same vocabulary when loading a test file.
    """
    path = Path(path)
    rows = _parse_rows(path.read_text(), path)
    if not rows:
        raise SchemaError(f"{path}: no rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        first = len(rows[0])
        bad = next(i for i, r in enumerate(rows) if len(r) != first)
        raise SchemaError(f"{path}: inconsistent field counts (row {bad} has {len(rows[bad])}, expected {first})")
    table = np.asarray(rows, dtype=np.float64)

    if format == "delimited-label-first":
        if table.shape[1] < 2:
            raise SchemaError(f"{path}: rows need a label and at least one value")
        raw_labels = table[:, 0]
        samples = table[:, None, 1:]
    elif format == "delimited-multichannel":
        if table.shape[1] < 4:
            raise SchemaError(f"{path}: multichannel rows need sample, channel, label and values")
        sid = table[:, 0].astype(np.int64)
        cid = table[:, 1].astype(np.int64)
        n, m = sid.max() + 1, cid.max() + 1
        if len(rows) != n * m or sid.min() < 0 or cid.min() < 0:
            raise SchemaError(f"{path}: expected {n}x{m} (sample, channel) rows, got {len(rows)}")
        samples = np.full((n, m, table.shape[1] - 3), np.nan)
        raw_labels = np.full(n, np.nan)
        seen = np.zeros((n, m), dtype=bool)
        for r, (i, c) in enumerate(zip(sid, cid)):
            if seen[i, c]:
                raise SchemaError(f"{path}: row {r} duplicates sample {i} channel {c}")
            seen[i, c] = True
            if not np.isnan(raw_labels[i]) and raw_labels[i] != table[r, 2]:
                raise SchemaError(f"{path}: row {r} disagrees on the label of sample {i}")
            raw_labels[i] = table[r, 2]
            samples[i, c] = table[r, 3:]
    else:
        raise ValueError(f"unknown format {format!r}")

    labels, vocab = _encode_labels(raw_labels, label_values)
    return TimeSeriesDataset(samples=samples, labels=labels, class_count=len(vocab),
                             split=np.full(len(labels), split), name=name or path.stem,
                             label_values=vocab)


def load_split_pair(train_path, test_path, format: str = "delimited-label-first",
                    name: Optional[str] = None) -> TimeSeriesDataset:
    """Load a UCR/UEA style ``_TRAIN`` / ``_TEST`` pair with a shared label vocabulary."""
    probe_train = load_dataset(train_path, format)
    probe_test = load_dataset(test_path, format)
    vocab = tuple(sorted(set(probe_train.label_values) | set(probe_test.label_values)))
    train = load_dataset(train_path, format, "train", label_values=vocab)
    test = load_dataset(test_path, format, "test", label_values=vocab)
    if train.length != test.length:
        # lengths may legitimately differ before resampling; align to the train length
        test = resample_to_length(test, train.length)
    return concat([train, test], name=name or Path(train_path).stem.replace("_TRAIN", ""))


def concat(parts: Sequence[TimeSeriesDataset], name: Optional[str] = None) -> TimeSeriesDataset:
    first = parts[0]
    if any(p.samples.shape[1:] != first.samples.shape[1:] for p in parts):
        raise SchemaError("datasets must share channel count and length to concatenate")
    obs = None
    if any(p.observed is not None for p in parts):
        obs = np.concatenate([p.observed if p.observed is not None else np.ones_like(p.samples, bool)
                              for p in parts])
    return TimeSeriesDataset(
        samples=np.concatenate([p.samples for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        class_count=max(p.class_count for p in parts),
        split=np.concatenate([p.split for p in parts]),
        name=name or first.name, label_values=first.label_values, observed=obs)


def export_dataset(dataset: TimeSeriesDataset, path=None, split: Optional[str] = None,
                   delimiter: str = "\t") -> str:
    """Write a dataset in the format :func:`load_dataset` reads (9 significant digits).

    Univariate datasets use the label-first layout, multivariate ones the
    multichannel layout. Returns the text; also writes it when ``path`` is given.
    """
    idx = dataset.indices(split) if split else np.arange(dataset.n_samples)
    vocab = dataset.label_values or tuple(float(c) for c in range(dataset.class_count))
    buf = io.StringIO()

    def fmt(v):
        return format(float(v), ".9g")

    for out_i, i in enumerate(idx):
        label = fmt(vocab[dataset.labels[i]])
        if dataset.n_channels == 1:
            buf.write(delimiter.join([label] + [fmt(v) for v in dataset.samples[i, 0]]) + "\n")
        else:
            for c in range(dataset.n_channels):
                head = [str(out_i), str(c), label]
                buf.write(delimiter.join(head + [fmt(v) for v in dataset.samples[i, c]]) + "\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# preprocessing


def resample_to_length(dataset: TimeSeriesDataset, target_length: int) -> TimeSeriesDataset:
    """Linearly interpolate every channel onto ``target_length`` uniform points."""
    if target_length < 2:
        raise ValueError("target_length must be >= 2")
    length = dataset.length
    if length == target_length:
        return dataset
    src = np.arange(length, dtype=np.float64)
    dst = np.linspace(0.0, length - 1, target_length)
    flat = dataset.samples.reshape(-1, length)
    out = np.stack([np.interp(dst, src, row) for row in flat])
    obs = None
    if dataset.observed is not None:
        # a resampled point counts as observed when its nearest source point was
        near = np.clip(np.rint(dst).astype(int), 0, length - 1)
        obs = dataset.observed[..., near]
    return dataset.with_values(out.reshape(dataset.n_samples, dataset.n_channels, target_length), obs)


def z_normalize(dataset: TimeSeriesDataset, stats_source: str = "per-series",
                eps: float = 1e-12) -> TimeSeriesDataset:
    """Standardize channels to zero mean / unit population std; constant channels become 0."""
    x = dataset.samples
    if stats_source == "per-series":
        mean = x.mean(axis=2, keepdims=True)
        std = x.std(axis=2, keepdims=True)
    elif stats_source == "train-set":
        tr = x[dataset.indices("train")]
        if len(tr) == 0:
            raise ValueError("train-set normalization needs a non-empty train split")
        mean = tr.mean(axis=(0, 2), keepdims=True)[0][None]
        std = tr.std(axis=(0, 2), keepdims=True)[0][None]
    else:
        raise ValueError(f"unknown stats_source {stats_source!r}")
    flat = std <= eps
    out = np.where(flat, 0.0, (x - mean) / np.where(flat, 1.0, std))
    return dataset.with_values(out, dataset.observed)


# ---------------------------------------------------------------------------
# degradations


def truncate_prefix(dataset: TimeSeriesDataset, spec: PartialnessSpec) -> TimeSeriesDataset:
    keep = spec.prefix_length(dataset.length)
    if keep == dataset.length:
        return dataset
    obs = None if dataset.observed is None else dataset.observed[..., :keep]
    return dataset.with_values(dataset.samples[..., :keep], obs)


def suffix_view(dataset: TimeSeriesDataset, fraction: float) -> TimeSeriesDataset:
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    keep = fraction_count(fraction, dataset.length)
    if keep == dataset.length:
        return dataset
    obs = None if dataset.observed is None else dataset.observed[..., -keep:]
    return dataset.with_values(dataset.samples[..., -keep:], obs)


def selected_channels(spec: PartialnessSpec, n_channels: int) -> list[int]:
    if spec.channel_rule == "keep-explicit-list":
        chans = [int(c) for c in spec.channels]
        bad = [c for c in chans if not 0 <= c < n_channels]
        if bad:
            raise ValueError(f"channels {bad} out of range for M={n_channels}")
        if len(set(chans)) != len(chans):
            raise ValueError("channel list contains duplicates")
        return chans
    return list(range(spec.channel_count(n_channels)))


def mask_channels(dataset: TimeSeriesDataset, spec: PartialnessSpec) -> TimeSeriesDataset:
    chans = selected_channels(spec, dataset.n_channels)
    if chans == list(range(dataset.n_channels)):
        return dataset
    obs = None if dataset.observed is None else dataset.observed[:, chans]
    return dataset.with_values(dataset.samples[:, chans], obs)


def apply_partialness(dataset: TimeSeriesDataset, spec: PartialnessSpec) -> TimeSeriesDataset:
    return truncate_prefix(mask_channels(dataset, spec), spec)


# ---------------------------------------------------------------------------
# split management and supervision corruption


def _stratified_pick(labels: np.ndarray, fraction: float, rng: np.random.Generator,
                     keep_one: bool) -> np.ndarray:
    """Positions (into ``labels``) chosen per class, ``round(fraction * n_c)`` each."""
    picked = []
    for c in np.unique(labels):
        pos = np.flatnonzero(labels == c)
        k = int(round(fraction * len(pos)))
        if keep_one:
            k = min(k, len(pos) - 1)
        if k > 0:
            picked.append(rng.choice(pos, size=k, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=np.int64)


def carve_validation(dataset: TimeSeriesDataset, val_fraction: float = 0.2,
                     seed: int = 0) -> TimeSeriesDataset:
    """Move a stratified ``val_fraction`` of the train split into ``val``."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError("val_fraction must lie in (0, 1)")
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise ValueError("train split is empty")
    rng = np.random.default_rng(seed)
    # singleton classes keep their only sample in train
    pos = _stratified_pick(dataset.labels[train_idx], val_fraction, rng, keep_one=True)
    split = dataset.split.copy()
    split[train_idx[pos]] = "val"
    return replace(dataset, split=split)


def degrade_supervision(dataset: TimeSeriesDataset, data_keep_fraction: float = 1.0,
                        label_noise_fraction: float = 0.0, seed: int = 0) -> TimeSeriesDataset:
    """Subsample the train split (stratified) and flip a fraction of its labels.

    Flipped labels are replaced by a uniformly drawn *different* class.
    Validation and test samples are untouched.
    """
    for v in (data_keep_fraction, label_noise_fraction):
        if not 0.0 <= v <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    train_idx = dataset.indices("train")
    drop = np.array([], dtype=np.int64)
    if data_keep_fraction < 1.0:
        keep_pos = _stratified_pick(dataset.labels[train_idx], data_keep_fraction, rng, keep_one=False)
        drop = np.setdiff1d(train_idx, train_idx[keep_pos])
    keep_all = np.setdiff1d(np.arange(dataset.n_samples), drop)
    out = dataset.take(keep_all)

    if label_noise_fraction > 0.0 and dataset.class_count > 1:
        tr = out.indices("train")
        n_flip = int(round(label_noise_fraction * len(tr)))
        flip = rng.choice(tr, size=n_flip, replace=False)
        labels = out.labels.copy()
        for i in flip:
            others = [c for c in range(out.class_count) if c != labels[i]]
            labels[i] = others[rng.integers(len(others))]
        out = replace(out, labels=labels)
    return out


# ---------------------------------------------------------------------------
# missing values


def impute_missing(dataset: TimeSeriesDataset) -> TimeSeriesDataset:
    """Forward- then backward-fill each channel; fully missing channels get the train mean.

    Missingness comes from ``dataset.observed`` (False = missing). The train
    mean of a channel is taken over its observed train values.
    """
    if dataset.observed is None:
        return dataset
    x = dataset.samples
    obs = dataset.observed
    tr = dataset.indices("train")
    means = np.empty(dataset.n_channels)
    for c in range(dataset.n_channels):
        vals = x[tr, c][obs[tr, c]]
        if vals.size == 0:
            raise ImputationError(f"channel {c} is missing in every train sample")
        means[c] = vals.mean()

    out = np.array(x, copy=True)
    for i in range(dataset.n_samples):
        for c in range(dataset.n_channels):
            m = obs[i, c]
            if m.all():
                continue
            if not m.any():
                out[i, c] = means[c]
                continue
            row = out[i, c]
            seen = np.flatnonzero(m)
            # forward fill: index of the last observation at or before t
            last = np.maximum.accumulate(np.where(m, np.arange(len(m)), -1))
            filled = np.where(last >= 0, row[np.maximum(last, 0)], np.nan)
            # backward fill the leading gap with the first observation
            filled[: seen[0]] = row[seen[0]]
            out[i, c] = filled
    return dataset.with_values(out, np.ones_like(obs))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    N: int = 600
    M: int = 1
    L: int = 100
    C: int = 2
    prefix_snr: float = 0.5
    suffix_snr: float = 4.0
    seed: int = 0
    test_fraction: float = 0.3


def class_templates(config: SyntheticConfig) -> np.ndarray:
    """Class templates ``[C, M, L]`` with unit RMS amplitude in each half.

    Each half of each channel holds a smooth random zero-mean waveform; the
    generator multiplies it by the half's SNR, so ``snr`` is the RMS amplitude
    of the pattern relative to the unit-variance noise.
    """
    rng = np.random.default_rng([config.seed, 1])
    half = config.L // 2
    t = np.arange(config.L, dtype=np.float64)
    out = np.zeros((config.C, config.M, config.L))
    for c in range(config.C):
        for m in range(config.M):
            freqs = rng.uniform(1.0, 4.0, size=3)
            phases = rng.uniform(0, 2 * np.pi, size=3)
            amps = rng.normal(size=3)
            wave = sum(a * np.sin(2 * np.pi * f * t / config.L + p)
                       for a, f, p in zip(amps, freqs, phases))
            for sl in (slice(0, half), slice(half, config.L)):
                seg = wave[sl] - wave[sl].mean()
                out[c, m, sl] = seg / np.sqrt(np.mean(seg ** 2))
    return out


def make_synthetic_late_signal(config: SyntheticConfig = SyntheticConfig()) -> TimeSeriesDataset:
    """Balanced classes whose template is faint in the first half and strong in the second."""
    if config.C < 2:
        raise ValueError("need at least two classes")
    if not config.suffix_snr > config.prefix_snr >= 0:
        raise ValueError("require suffix_snr > prefix_snr >= 0")
    rng = np.random.default_rng([config.seed, 0])
    half = config.L // 2
    templates = class_templates(config)
    gain = np.ones(config.L)
    gain[:half] = config.prefix_snr
    gain[half:] = config.suffix_snr

    labels = np.arange(config.N) % config.C
    rng.shuffle(labels)
    x = rng.standard_normal((config.N, config.M, config.L)) + templates[labels] * gain

    split = np.full(config.N, "train", dtype="<U5")
    n_test_per_class = int(round(config.test_fraction * config.N / config.C))
    for c in range(config.C):
        pos = np.flatnonzero(labels == c)
        split[pos[:n_test_per_class]] = "test"
    return TimeSeriesDataset(samples=x, labels=labels, class_count=config.C, split=split,
                             name="synthetic-late-signal",
                             label_values=tuple(float(c) for c in range(config.C)))


def preprocess(dataset: TimeSeriesDataset, length: Optional[int] = 100,
               normalize: Optional[str] = "per-series") -> TimeSeriesDataset:
    """Resample then z-normalize (the order used throughout the harness)."""
    if length is not None:
        dataset = resample_to_length(dataset, length)
    if normalize:
        dataset = z_normalize(dataset, normalize)
    return dataset
