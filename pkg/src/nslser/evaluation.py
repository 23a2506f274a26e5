"""Accuracy, unweighted average recall, confusion matrices and the one-tailed z-test."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    return cm


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


def per_class_recall(cm) -> np.ndarray:
    """Recall per class; NaN where the class has no support."""
    cm = _check_cm(cm)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)


def uar(cm) -> float:
    """Mean recall over classes with nonzero support."""
    recalls = per_class_recall(cm)
    present = ~np.isnan(recalls)
    if not present.any():
        raise ValueError("UAR is undefined: every class has zero support")
    if not present.all():
        log.warning("UAR: %d class(es) with zero support excluded", int((~present).sum()))
    return float(recalls[present].mean())


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


@dataclass(frozen=True)
class ZTest:
    z: float
    p: float


def z_test(rate_a: float, rate_b: float, n_a: int, n_b: int) -> ZTest:
    """Pooled two-proportion z statistic and the one-tailed p-value for rate_a > rate_b."""
    for r in (rate_a, rate_b):
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rates must lie in [0, 1], got {r}")
    if n_a < 1 or n_b < 1:
        raise ValueError("sample counts must be >= 1")
    pooled = (rate_a * n_a + rate_b * n_b) / (n_a + n_b)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n_a + 1.0 / n_b))
    diff = rate_a - rate_b
    if se == 0.0:
        # Pooled rate 0 or 1 forces equal rates; keep the limit values for safety.
        if diff == 0:
            return ZTest(0.0, 0.5)
        return ZTest(math.copysign(math.inf, diff), 0.0 if diff > 0 else 1.0)
    z = diff / se
    return ZTest(z, 0.5 * math.erfc(z / math.sqrt(2.0)))


def one_tailed_z_test(uar_a: float, uar_b: float, n_a: int, n_b: int) -> float:
    return z_test(uar_a, uar_b, n_a, n_b).p


# -- model evaluation ------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    uar: float
    confusion: np.ndarray
    n: int


def evaluate_arrays(params, model_cfg, x, y, num_classes: int, upstream=None, fusion=None) -> EvalResult:
    from .nn.model import predict

    pred = predict(params, model_cfg, x, upstream, fusion)
    cm = confusion_matrix(y, pred, num_classes)
    return EvalResult(accuracy(cm), uar(cm), cm, int(len(y)))


def evaluate(checkpoint, model_cfg, manifest, split: str, feature_dir, embeddings=None) -> EvalResult:
    """Score a checkpoint on one manifest split; samples are visited in id order."""
    from .audio import load_features
    from .nn.checkpoint import load_checkpoint

    params, meta = load_checkpoint(checkpoint, model_cfg)
    records = sorted(manifest.require_split(split), key=lambda r: r.id)
    ids = [r.id for r in records]
    x = load_features(feature_dir, ids)
    y = np.array(manifest.labels(records))
    fusion = meta.get("fusion")
    upstream = None
    if fusion:
        if embeddings is None:
            raise ValueError(f"checkpoint uses {fusion} fusion; upstream embeddings are required")
        upstream = embeddings.subset(ids).vectors
    return evaluate_arrays(params, model_cfg, x, y, len(manifest.vocab), upstream, fusion)


def save_confusion(path, cm, classes) -> None:
    lines = ["true\\pred\t" + "\t".join(classes)]
    for name, row in zip(classes, np.asarray(cm)):
        lines.append(name + "\t" + "\t".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_confusion(path) -> tuple[list[str], np.ndarray]:
    rows = [r.split("\t") for r in Path(path).read_text(encoding="utf-8").splitlines() if r]
    classes = rows[0][1:]
    return classes, np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
