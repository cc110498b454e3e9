"""Distillation losses for the single-teacher and multi-teacher stages.

Soft labels are combined and tempered at the logit level: the teacher side goes
through a tempered softmax, the student side through a tempered log-softmax, and
the cross entropy is scaled by ``T**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoders import RecModel
from .tensor import Tensor


@dataclass(frozen=True)
class KDConfig:
    T1: float = 1.0
    T2: float = 1.0
    beta1: float = 1.0
    beta2: float = 0.1
    distill_weight: float = 1.0
    emb_weight: float = 1.0
    combine: str = "logits"

    def __post_init__(self):
        if self.T1 <= 0 or self.T2 <= 0:
            raise ValueError("temperatures must be positive")
        if self.combine not in ("logits", "probs"):
            raise ValueError(f"combine must be 'logits' or 'probs', got {self.combine!r}")


def _tempered_ce(target_logits: Tensor, student_logits: Tensor, T: float) -> Tensor:
    target = tn.softmax(target_logits * (1.0 / T), axis=-1)
    return tn.cross_entropy(target, student_logits * (1.0 / T)) * (T * T)


def soft_distill_loss(teacher_logits, student_logits: Tensor, T: float) -> Tensor:
    """``T**2 * CE(softmax(teacher/T), student/T)``; the teacher side carries no gradient."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    teacher = tn.as_tensor(teacher_logits).detach()
    if teacher.shape != student_logits.shape:
        raise ValueError(f"shape mismatch: {teacher.shape} vs {student_logits.shape}")
    return _tempered_ce(teacher, student_logits, T)


def stage1_emb_loss(teacher_titles, teacher_bodies, student_titles: Tensor, student_bodies: Tensor) -> Tensor:
    return (tn.mse(tn.as_tensor(teacher_titles).detach(), student_titles)
            + tn.mse(tn.as_tensor(teacher_bodies).detach(), student_bodies))


def target_loss(student_logits: Tensor, labels) -> Tensor:
    """Cross entropy against one-hot ground truth given as class indices."""
    labels = np.asarray(labels)
    return tn.cross_entropy(tn.one_hot(labels, student_logits.shape[-1]), student_logits)


@dataclass
class LossParts:
    total: Tensor
    distill: Tensor
    emb: Tensor
    target: Tensor

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "distill": self.distill.item(),
                "emb": self.emb.item(), "target": self.target.item()}


def stage1_total_loss(teacher_logits, teacher_titles, teacher_bodies, student_logits: Tensor,
                      student_titles: Tensor, student_bodies: Tensor, labels, config: KDConfig) -> LossParts:
    distill = soft_distill_loss(teacher_logits, student_logits, config.T1)
    emb = stage1_emb_loss(teacher_titles, teacher_bodies, student_titles, student_bodies)
    target = target_loss(student_logits, labels)
    total = distill * config.distill_weight + emb * config.emb_weight + target * config.beta1
    return LossParts(total, distill, emb, target)


# -- multi-teacher ------------------------------------------------------------------

OMEGA_INIT = 1.0


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def per_sample_ce(logits: np.ndarray, labels) -> np.ndarray:
    """``-log softmax(logits)[label]`` per row, as plain numbers."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -logp[np.arange(len(logp)), np.asarray(labels)]


def teacher_weights(per_teacher_losses, omega) -> Tensor:
    """Per-sample weights ``softmax(-loss * omega)`` over the teacher axis (last axis).

    The losses are constants; ``omega`` may be a differentiable scalar tensor.
    """
    losses = np.asarray(per_teacher_losses, dtype=np.float64)
    if losses.shape[-1] == 0:
        raise ValueError("at least one teacher is required")
    omega = tn.as_tensor(omega)
    return tn.softmax(omega * (-losses), axis=-1)


def stage2_distill_loss(teacher_logits, weights: Tensor, student_logits: Tensor, T: float,
                        combine: str = "logits") -> Tensor:
    """Distill from the ``weights``-combined soft labels of M teachers.

    ``teacher_logits`` is (M, batch, C) and carries no gradient; ``weights`` is
    (batch, M) and may carry gradient back to omega.
    """
    if T <= 0:
        raise ValueError("temperature must be positive")
    teachers = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                          dtype=np.float64)
    weights = tn.as_tensor(weights)
    if teachers.ndim != 3 or weights.shape != (teachers.shape[1], teachers.shape[0]):
        raise ValueError(f"weights {weights.shape} do not match teacher logits {teachers.shape}")
    if combine == "probs":
        probs = np.exp(teachers / T - teachers.max(axis=-1, keepdims=True) / T)
        probs /= probs.sum(axis=-1, keepdims=True)
        target = _weighted_sum(probs, weights)
        return tn.cross_entropy(target, student_logits * (1.0 / T)) * (T * T)
    return _tempered_ce(_weighted_sum(teachers, weights), student_logits, T)


def _weighted_sum(per_teacher: np.ndarray, weights: Tensor) -> Tensor:
    combined = None
    for i in range(per_teacher.shape[0]):
        term = weights[:, i].reshape(-1, 1) * per_teacher[i]
        combined = term if combined is None else combined + term
    return combined


def project_teacher_rep(weight: Tensor, bias: Tensor, rep) -> Tensor:
    """Affine map ``rep @ weight + bias`` applied over the last axis."""
    return tn.linear(tn.as_tensor(rep), weight, bias)


def masked_sample_mse(a: Tensor, b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Per-sample mean squared error over all axes but the first.

    With ``mask`` of shape ``a.shape[:2]``, masked slots are excluded from the mean.
    """
    diff = a - b
    sq = (diff * diff).sum(axis=-1)
    if sq.ndim == 1:
        return sq * (1.0 / a.shape[-1])
    if mask is None:
        mask = np.ones(sq.shape)
    mask = np.asarray(mask, dtype=np.float64)
    counts = np.maximum(mask.sum(axis=1), 1.0) * a.shape[-1]
    return (sq * mask).sum(axis=1) * (1.0 / counts)


class TeacherEnsemble:
    """Frozen finetuned teachers plus trainable per-teacher projections and omega."""

    def __init__(self, teachers: list[RecModel], student_dim: int, seed: int = 0):
        if not teachers:
            raise ValueError("teacher ensemble must not be empty")
        rng = np.random.default_rng(seed)
        self.teachers = teachers
        self.rho = Tensor(np.array(inverse_softplus(OMEGA_INIT)), requires_grad=True)
        self.projections: list[dict[str, Tensor]] = []
        for t in teachers:
            d = t.config.repr_dim
            self.projections.append({
                name: Tensor(rng.normal(0.0, 0.02, size=(d, student_dim)), requires_grad=True)
                if name.endswith("weight") else Tensor(np.zeros(student_dim), requires_grad=True)
                for name in ("news.weight", "news.bias", "user.weight", "user.bias")
            })

    def __len__(self) -> int:
        return len(self.teachers)

    def omega(self) -> Tensor:
        return tn.softplus(self.rho)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {"omega.rho": self.rho}
        for i, proj in enumerate(self.projections):
            out.update({f"proj{i}.{k}": v for k, v in proj.items()})
        return out


def stage2_emb_loss(teacher_news, teacher_users, projections, student_news: Tensor, student_user: Tensor,
                    weights: Tensor, news_mask: np.ndarray | None = None) -> Tensor:
    """``mean_b sum_i w[b, i] * (news_mse_i[b] + user_mse_i[b])``.

    ``teacher_news[i]`` is (batch, slots, d_t) covering history and candidate
    news; ``teacher_users[i]`` is (batch, d_t).
    """
    weights = tn.as_tensor(weights)
    total = None
    for i, proj in enumerate(projections):
        news_i = masked_sample_mse(project_teacher_rep(proj["news.weight"], proj["news.bias"], teacher_news[i]),
                                   student_news, news_mask)
        user_i = masked_sample_mse(project_teacher_rep(proj["user.weight"], proj["user.bias"], teacher_users[i]),
                                   student_user)
        term = weights[:, i] * (news_i + user_i)
        total = term if total is None else total + term
    return total.mean()


def stage2_total_loss(teacher_logits, teacher_news, teacher_users, ensemble: TeacherEnsemble,
                      student_logits: Tensor, student_news: Tensor, student_user: Tensor, labels,
                      config: KDConfig, news_mask: np.ndarray | None = None) -> tuple[LossParts, Tensor]:
    """Assemble the stage-two objective; also returns the per-sample teacher weights."""
    teacher_logits = np.asarray(teacher_logits)
    labels = np.asarray(labels)
    losses = np.stack([per_sample_ce(t, labels) for t in teacher_logits], axis=-1)
    weights = teacher_weights(losses, ensemble.omega())
    distill = stage2_distill_loss(teacher_logits, weights, student_logits, config.T2, config.combine)
    emb = stage2_emb_loss(teacher_news, teacher_users, ensemble.projections, student_news, student_user,
                          weights, news_mask)
    target = target_loss(student_logits, labels)
    total = distill * config.distill_weight + emb * config.emb_weight + target * config.beta2
    return LossParts(total, distill, emb, target), weights
