"""Confusion matrices, WAR (overall accuracy) and UAR (mean per-class recall)."""

import numpy as np

from .errors import UndefinedMetricError, ValidationError


def confusion(preds, truth, c):
    """``c x c`` integer counts; rows are true classes, columns predictions."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if preds.shape != truth.shape:
        raise ValidationError(f"{preds.size} predictions for {truth.size} labels")
    if preds.size and (min(preds.min(), truth.min()) < 0 or max(preds.max(), truth.max()) >= c):
        raise ValidationError(f"classes must lie in [0, {c})")
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def war(cm):
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise UndefinedMetricError("WAR is undefined on an empty confusion matrix")
    return float(np.trace(cm) / total)


def uar(cm):
    """Mean recall over classes that have at least one true sample."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise UndefinedMetricError("UAR is undefined when no class has samples")
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def summarize(cm):
    return {"war": war(cm), "uar": uar(cm), "confusion": np.asarray(cm).tolist()}
