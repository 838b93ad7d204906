"""Joint, per-modality and per-class accuracy of a global model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError
from .data import MultimodalDataset
from .imbalance import LossBreakdown
from .model import ModelParams, forward_full, forward_unimodal

HEADS = ("joint", "m0", "m1")


@dataclass
class RoundMetrics:
    joint_acc: float
    acc_m0: float
    acc_m1: float
    per_class: np.ndarray  # (C, 3): joint, m0, m1
    class_counts: np.ndarray
    loss: LossBreakdown = field(default_factory=LossBreakdown)
    rho_mean: float = 1.0

    @property
    def num_classes(self) -> int:
        return self.per_class.shape[0]

    def weak_class_std(self, weak: int = 1) -> float:
        """Spread of per-class accuracy of one modality (column ``1 + weak``)."""
        return float(np.std(self.per_class[:, 1 + weak]))

    def to_dict(self) -> dict:
        return {
            "joint_acc": self.joint_acc,
            "acc_m0": self.acc_m0,
            "acc_m1": self.acc_m1,
            "per_class": self.per_class.tolist(),
            "loss": {f: getattr(self.loss, f) for f in LossBreakdown.FIELDS},
            "rho_mean": self.rho_mean,
        }


def predict(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.asarray(ad.value(logits)), axis=1)


def _per_class(correct: np.ndarray, y: np.ndarray, C: int) -> np.ndarray:
    counts = np.bincount(y, minlength=C)
    hits = np.bincount(y, weights=correct.astype(np.float64), minlength=C)
    return np.divide(hits, counts, out=np.zeros(C), where=counts > 0)


def evaluate(params: ModelParams, test: MultimodalDataset) -> RoundMetrics:
    if len(test) == 0:
        raise ParameterError("empty test set")
    C = params.cfg.num_classes
    if test.num_classes != C:
        raise ParameterError(f"model has {C} classes, test set {test.num_classes}")
    y = test.y
    preds = [
        predict(forward_full(params, test.x_m0, test.x_m1, with_ip=False).joint),
        predict(forward_unimodal(params, 0, test.x_m0)),
        predict(forward_unimodal(params, 1, test.x_m1)),
    ]
    correct = [p == y for p in preds]
    per_class = np.stack([_per_class(c, y, C) for c in correct], axis=1)
    accs = [float(np.mean(c)) for c in correct]
    return RoundMetrics(accs[0], accs[1], accs[2], per_class, np.bincount(y, minlength=C))
