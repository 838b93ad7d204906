"""Discrepancy ratios, class-wise temperatures and the local training loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError, ShapeError, UsageError
from .model import ForwardOutputs

T_MIN = 0.1


@dataclass(frozen=True)
class DiscrepancyStats:
    rho_class: np.ndarray
    rho_overall: float
    temps: np.ndarray
    rho_batch: float | None = None


@dataclass
class LossBreakdown:
    l_ce: float = 0.0
    l_ce_m0: float = 0.0
    l_ce_m1: float = 0.0
    l_rd: float = 0.0
    l_prox: float = 0.0
    total: float = 0.0
    teacher_modality: int | None = None

    FIELDS = ("l_ce", "l_ce_m0", "l_ce_m1", "l_rd", "l_prox", "total")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        arr = np.array([b.as_tuple() for b in items]).mean(axis=0)
        return cls(*map(float, arr))


def ground_truth_probs(logits, labels) -> np.ndarray:
    """Softmax probability (temperature 1) each row assigns to its label."""
    p = ad.softmax(np.asarray(ad.value(logits)))
    labels = np.asarray(labels)
    return p[np.arange(len(labels)), labels]


def batch_discrepancy_ratio(sp_logits_m0, sp_logits_m1, labels) -> float:
    """Summed ground-truth confidence of m0 over that of m1; > 1 means m0 is ahead."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ParameterError("empty batch")
    return float(ground_truth_probs(sp_logits_m0, labels).sum() / ground_truth_probs(sp_logits_m1, labels).sum())


def classwise_discrepancy(sp_logits_m0, sp_logits_m1, labels, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class ratios over a client's whole shard, and their mean.

    Classes with no samples are filled with the mean of the present classes,
    which leaves their temperature at the base value.
    """
    labels = np.asarray(labels)
    s0 = ground_truth_probs(sp_logits_m0, labels)
    s1 = ground_truth_probs(sp_logits_m1, labels)
    num = np.bincount(labels, weights=s0, minlength=num_classes)
    den = np.bincount(labels, weights=s1, minlength=num_classes)
    present = np.bincount(labels, minlength=num_classes) > 0
    if not present.any():
        raise ParameterError("no samples to compute class ratios")
    rho_c = np.empty(num_classes)
    rho_c[present] = num[present] / den[present]
    rho = float(rho_c[present].mean())
    rho_c[~present] = rho
    return rho_c, rho


def adapt_temperature(rho_class, rho_overall: float, T: float, beta: float, t_min: float = T_MIN) -> np.ndarray:
    """Shrink the student temperature on classes where the teacher's lead is above average.

    For ``rho_overall >= 1`` (m0 ahead) a class is adapted when
    ``rho_c > rho_overall`` to ``T / (1 + beta * log(rho_c / rho_overall))``.
    When m1 is ahead the same rule runs on reciprocal ratios. Results are
    clamped to ``[t_min, T]``.
    """
    rho_class = np.asarray(rho_class, dtype=np.float64)
    if np.any(rho_class <= 0) or rho_overall <= 0:
        raise ParameterError("discrepancy ratios must be positive")
    if T <= 0 or beta <= 0 or t_min <= 0:
        raise ParameterError("T, beta and t_min must be positive")
    if rho_overall >= 1.0:
        lead = rho_class / rho_overall
    else:
        lead = (1.0 / rho_class) / (1.0 / rho_overall)
    temps = np.full(rho_class.shape, float(T))
    adapt = lead > 1.0
    temps[adapt] = T / (1.0 + beta * np.log(lead[adapt]))
    return np.clip(temps, min(t_min, T), T)


def choose_teacher(rho_batch: float) -> int:
    """Modality index of the teacher: m0 when strictly ahead, else m1."""
    if rho_batch <= 0:
        raise ParameterError("ratio must be positive")
    return 0 if rho_batch > 1.0 else 1


def distillation_loss(teacher_logits, student_logits, labels, T: float, temps, t2_scaling: bool = False):
    """Batch-mean KL from the frozen teacher at ``T`` to the student at ``temps[label]``.

    ``teacher_logits`` is treated as a constant; only the student side can
    carry gradient.
    """
    teacher = np.asarray(ad.value(teacher_logits), dtype=np.float64)
    sv = ad.value(student_logits)
    temps = np.asarray(temps, dtype=np.float64)
    labels = np.asarray(labels)
    if teacher.shape != sv.shape:
        raise ShapeError(f"teacher {teacher.shape} vs student {sv.shape}")
    if temps.shape != (sv.shape[1],):
        raise ShapeError("need one temperature per class")
    p_t = ad.softmax(teacher, T)
    p_s = ad.softmax(student_logits, temps[labels])
    loss = ad.mean(ad.kl_rows(p_t, p_s))
    return ad.scale(loss, T * T) if t2_scaling else loss


def prox_term(local_base: Mapping, global_base: Mapping):
    """``0.5 * ||local - global||^2`` over matching keys; the weight mu is applied by the caller."""
    if set(local_base) != set(global_base):
        raise UsageError("local and global parameter keys differ")
    return ad.half_sq_dist(local_base, {k: ad.value(v) for k, v in global_base.items()})


@dataclass
class LossConfig:
    kappa: float = 2.0
    mu: float = 1.0
    temperature: float = 3.0
    t2_scaling: bool = False


def assemble_total_loss(
    outputs: ForwardOutputs,
    labels,
    cfg: LossConfig,
    local_base: Mapping,
    global_base: Mapping,
    *,
    client_kind: str = "multimodal",
    modality: int | None = None,
    stats: DiscrepancyStats | None = None,
    teacher: int | None = None,
    teacher_logits=None,
    student_logits=None,
):
    """Differentiable local loss and its float breakdown.

    Multimodal clients of the two-projector network use
    ``L_ce + L_ce^m0 + L_ce^m1 + kappa * L_rd + mu * L_prox``. Plain-network
    multimodal clients use ``L_ce + mu * L_prox``. Unimodal clients use the
    cross entropy of their modality's logits (``outputs.sp_logits[modality]``)
    plus ``mu * L_prox`` over the modules they train.
    """
    labels = np.asarray(labels)
    bd = LossBreakdown()
    terms = []

    def ce(logits):
        return ad.softmax_cross_entropy(logits, labels)

    if client_kind == "multimodal":
        l_ce = ce(outputs.joint)
        bd.l_ce = float(ad.value(l_ce))
        terms.append(l_ce)
        if outputs.sp_logits[0] is not None:
            if stats is None or teacher is None:
                raise UsageError("multimodal two-projector loss needs discrepancy stats and a teacher")
            for m in (0, 1):
                lm = ce(outputs.sp_logits[m])
                setattr(bd, f"l_ce_m{m}", float(ad.value(lm)))
                terms.append(lm)
            l_rd = distillation_loss(teacher_logits, student_logits, labels, cfg.temperature, stats.temps, cfg.t2_scaling)
            bd.l_rd = float(ad.value(l_rd))
            bd.teacher_modality = teacher
            terms.append(ad.scale(l_rd, cfg.kappa))
    elif client_kind == "unimodal":
        if modality not in (0, 1):
            raise UsageError("unimodal loss needs the client's modality")
        lm = ce(outputs.sp_logits[modality])
        setattr(bd, f"l_ce_m{modality}", float(ad.value(lm)))
        terms.append(lm)
    else:
        raise UsageError(f"unknown client kind {client_kind!r}")

    prox = prox_term(local_base, global_base)
    bd.l_prox = float(ad.value(prox))
    terms.append(ad.scale(prox, cfg.mu))
    loss = ad.add_scalars(*terms)
    bd.total = float(ad.value(loss))
    return loss, bd
