"""Accuracy and error reporting for trait predictions.

Per-trait accuracy is the mean of (1 - |prediction - truth|) in percent;
the headline number is the unweighted mean over the five traits.
"""

from dataclasses import dataclass

import numpy as np

from .align import PersonalityVector
from .errors import ValidationError

TRAIT_NAMES = ("openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism")


@dataclass
class MetricReport:
    trait_accuracy: np.ndarray  # (5,) percent
    average_accuracy: float
    trait_mse: np.ndarray  # (5,)
    sample_count: int
    accuracy_std: float | None = None  # across seeds, when aggregated

    def __post_init__(self):
        self.trait_accuracy = np.asarray(self.trait_accuracy, dtype=np.float64)
        self.trait_mse = np.asarray(self.trait_mse, dtype=np.float64)
        if np.any(self.trait_accuracy < 0.0) or np.any(self.trait_accuracy > 100.0):
            raise ValidationError("trait accuracy must lie in [0, 100]")
        if abs(self.average_accuracy - self.trait_accuracy.mean()) > 1e-9:
            raise ValidationError("average accuracy must equal the mean of the five traits")

    def to_dict(self):
        d = {
            "trait_accuracy": {
                name: float(v) for name, v in zip(TRAIT_NAMES, self.trait_accuracy)
            },
            "average_accuracy": float(self.average_accuracy),
            "trait_mse": {name: float(v) for name, v in zip(TRAIT_NAMES, self.trait_mse)},
            "sample_count": int(self.sample_count),
        }
        if self.accuracy_std is not None:
            d["accuracy_std"] = float(self.accuracy_std)
        return d


def _as_matrix(values, what: str) -> np.ndarray:
    if isinstance(values, np.ndarray):
        mat = values.astype(np.float64, copy=False)
    else:
        rows = [v.scores if isinstance(v, PersonalityVector) else np.asarray(v) for v in values]
        mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != 5:
        raise ValidationError(f"{what} must be (N, 5), got shape {mat.shape}")
    if np.any(mat < 0.0) or np.any(mat > 1.0):
        raise ValidationError(f"{what} contains values outside [0, 1]")
    return mat


def accuracy(preds, labels) -> MetricReport:
    """Trait-wise mean of (1 - |error|) in percent, plus MSE per trait."""
    p = _as_matrix(preds, "predictions")
    y = _as_matrix(labels, "labels")
    if p.shape != y.shape:
        raise ValidationError(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    if p.shape[0] < 1:
        raise ValidationError("need at least one prediction")
    err = np.abs(p - y)
    trait_acc = (1.0 - err).mean(axis=0) * 100.0
    trait_mse = (err * err).mean(axis=0)
    return MetricReport(
        trait_accuracy=trait_acc,
        average_accuracy=float(trait_acc.mean()),
        trait_mse=trait_mse,
        sample_count=p.shape[0],
    )


def aggregate_reports(reports, stds_from=None) -> MetricReport:
    """Unweighted mean over reports; optional std of average accuracy."""
    if not reports:
        raise ValidationError("nothing to aggregate")
    trait_acc = np.mean([r.trait_accuracy for r in reports], axis=0)
    trait_mse = np.mean([r.trait_mse for r in reports], axis=0)
    std = None
    if stds_from is not None:
        std = float(np.std([r.average_accuracy for r in stds_from]))
    return MetricReport(
        trait_accuracy=trait_acc,
        average_accuracy=float(trait_acc.mean()),
        trait_mse=trait_mse,
        sample_count=int(sum(r.sample_count for r in reports)),
        accuracy_std=std,
    )
