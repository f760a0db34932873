"""Suffix-transfer probes for prefix-trained students.

Both probes read a frozen backbone: the zero-shot probe reuses the original
head on suffix inputs, the linear probe fits a fresh logistic regression on
suffix features of the train split and scores the test split.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .data import PartialnessSpec, TimeSeriesDataset, suffix_view, truncate_prefix
from .metrics import auc_prc
from .models import Classifier, predict, state_checksum


def _view(dataset: TimeSeriesDataset, fraction: float, view: str) -> TimeSeriesDataset:
    if view == "suffix":
        return suffix_view(dataset, fraction)
    if view == "prefix":
        return truncate_prefix(dataset, PartialnessSpec(earliness=fraction))
    raise ValueError(f"view must be 'suffix' or 'prefix', got {view!r}")


@torch.no_grad()
def _features(model: Classifier, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        xt = torch.tensor(x, dtype=torch.float32)
        out = [model.features(xt[i:i + batch_size]) for i in range(0, len(xt), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy()


def _guard(model: Classifier, before: str):
    if state_checksum(model) != before:
        raise RuntimeError("frozen backbone changed during probing")


def zero_shot_suffix(student: Classifier, dataset: TimeSeriesDataset, fraction: float = 0.5,
                     view: str = "suffix") -> float:
    """Test AUC-PRC of the unchanged student on the last ``fraction`` of each series."""
    before = state_checksum(student)
    x, y = _view(dataset, fraction, view).subset("test")
    score = auc_prc(predict(student, torch.tensor(x, dtype=torch.float32)).numpy(), y)
    _guard(student, before)
    return score


def linear_probe_suffix(student: Classifier, dataset: TimeSeriesDataset, fraction: float = 0.5,
                        view: str = "suffix", C: float = 1.0, tol: float = 1e-6) -> float:
    """Fit multinomial logistic regression on frozen suffix features; return test AUC-PRC.

    ``view="prefix"`` probes the same inputs the original head saw, which is
    the refit sanity mode.
    """
    before = state_checksum(student)
    v = _view(dataset, fraction, view)
    x_tr, y_tr = v.subset("train")
    x_te, y_te = v.subset("test")
    probe = LogisticRegression(C=C, tol=tol, max_iter=10_000)
    probe.fit(_features(student, x_tr), y_tr)
    proba = np.zeros((len(x_te), dataset.class_count))
    proba[:, probe.classes_] = probe.predict_proba(_features(student, x_te))
    _guard(student, before)
    return auc_prc(proba, y_te)
