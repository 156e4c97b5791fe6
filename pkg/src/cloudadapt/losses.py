"""Training objectives: source cross-entropy (hard and soft targets),
Chamfer reconstruction, student/teacher feature consistency, and the joint
weighted total with its classification and segmentation compositions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .geometry import chamfer_distance


@dataclass
class LossBreakdown:
    """Component values (floats, for logging) plus the differentiable total.

    In segmentation mode ``l_soft`` holds the source-domain consistency term
    that replaces the soft classification loss; the weighted-sum identity
    total == lam * (l_s + l_soft) + l_t + l_cons holds in both modes.
    """

    l_s: float
    l_soft: float
    l_t: float
    l_cons: float
    total: float
    lam: float
    total_tensor: Tensor | None = None

    def components(self) -> dict[str, float]:
        return {"l_s": self.l_s, "l_soft": self.l_soft,
                "l_t": self.l_t, "l_cons": self.l_cons, "total": self.total}


def ce_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = log_probs.shape
    if labels.shape != (n,):
        raise ValueError(f"ce_loss: expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"ce_loss: label out of range [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return soft_ce_loss(log_probs, onehot, _validate=False)


def soft_ce_loss(log_probs: Tensor, soft_targets, _validate: bool = True) -> Tensor:
    """Mean cross-entropy against full target distributions."""
    targets = np.asarray(soft_targets, dtype=np.float64)
    if targets.shape != log_probs.shape:
        raise ValueError(
            f"soft_ce_loss: target shape {targets.shape} != log-prob shape {log_probs.shape}")
    if _validate:
        if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("soft_ce_loss: targets must be probability distributions")
    n = log_probs.shape[0]
    weighted = ad.mul_elementwise(log_probs, Tensor(targets))
    return ad.scalar_mul(ad.reduce_sum(weighted), -1.0 / n)


def consistency_loss(f_student: Tensor, f_teacher) -> Tensor:
    """Squared L2 distance between student and teacher features, averaged
    over rows (batch rows, or batch*points rows in segmentation mode). The
    teacher side enters as a constant."""
    ft = f_teacher.data if isinstance(f_teacher, Tensor) else np.asarray(f_teacher)
    if f_student.shape != ft.shape:
        raise ValueError(
            f"consistency_loss: shape mismatch {f_student.shape} vs {ft.shape}")
    n = f_student.shape[0] if len(f_student.shape) > 1 else 1
    diff = ad.sub(f_student, Tensor(ft))
    return ad.scalar_mul(ad.reduce_sum(ad.square(diff)), 1.0 / n)


def recon_loss(decoded: Tensor, originals: np.ndarray) -> Tensor:
    """Mean Chamfer distance over the batch.

    ``decoded`` is the (B*M, 3) decoder output; ``originals`` is (B, M, 3).
    """
    originals = np.asarray(originals, dtype=np.float64)
    if originals.ndim == 2:
        originals = originals[None]
    b, m, _ = originals.shape
    total = None
    for i in range(b):
        sample = ad.reshape(
            ad.gather_rows(decoded, np.arange(i * m, (i + 1) * m)), (m, 3))
        cd = chamfer_distance(sample, originals[i])
        total = cd if total is None else ad.add(total, cd)
    return ad.scalar_mul(total, 1.0 / b)


def total_loss(batch, student, teacher, lam: float, mode: str = "classification",
               use_pm: bool = False) -> LossBreakdown:
    """Joint objective over one paired source/target batch.

    Classification: lam * (L_s + L_soft) + L_t + L_cons with the source CE
    computed against soft mixup labels when ``use_pm``. Segmentation swaps
    the soft classification term for a source-domain feature consistency
    term; reconstruction and target consistency are unchanged.

    Inside the composition the reconstruction term is normalized per point
    and the consistency terms per feature element, so that all components
    share a per-element scale; otherwise the summed Chamfer and squared
    feature norms grow with cloud size / feature width and drown the
    lam-weighted classification terms.
    """
    src = np.asarray(batch.source_clouds, dtype=np.float64)
    tgt = np.asarray(batch.target_clouds, dtype=np.float64)
    m = tgt.shape[-2]
    feat_dim = student.arch.feature_dim

    if mode == "classification":
        enc_s = models.encode_batch(src, student, mode="global")
        logits_s = models.classify_batch(enc_s.global_, student)
        logp_s = ad.log_softmax(logits_s)
        if use_pm:
            l_s = soft_ce_loss(logp_s, batch.source_soft_labels)
        else:
            l_s = ce_loss(logp_s, batch.source_labels)

        with ad.no_grad():
            enc_s_t = models.encode_batch(src, teacher, mode="global")
            teacher_logp = ad.log_softmax(models.classify_batch(enc_s_t.global_, teacher))
            teacher_probs = np.exp(teacher_logp.data)
        l_soft = soft_ce_loss(logp_s, teacher_probs)

        enc_t = models.encode_batch(tgt, student, mode="global")
        decoded = models.decode_batch(enc_t.global_, student)
        l_t = ad.scalar_mul(recon_loss(decoded, tgt), 1.0 / m)

        with ad.no_grad():
            enc_t_teacher = models.encode_batch(tgt, teacher, mode="global")
        l_cons = ad.scalar_mul(
            consistency_loss(enc_t.global_, enc_t_teacher.global_.data),
            1.0 / feat_dim)

    elif mode == "segmentation":
        enc_s = models.encode_batch(src, student, mode="per_point")
        logits_s = models.segment_batch(enc_s.pointwise, student)
        logp_s = ad.log_softmax(logits_s)
        labels = np.asarray(batch.source_labels, dtype=np.int64).reshape(-1)
        l_s = ce_loss(logp_s, labels)

        with ad.no_grad():
            enc_s_teacher = models.encode_batch(src, teacher, mode="per_point")
        l_soft = ad.scalar_mul(
            consistency_loss(enc_s.pointwise, enc_s_teacher.pointwise.data),
            1.0 / (2 * feat_dim))

        enc_t = models.encode_batch(tgt, student, mode="per_point")
        decoded = models.decode_batch(enc_t.global_, student)
        l_t = ad.scalar_mul(recon_loss(decoded, tgt), 1.0 / m)

        with ad.no_grad():
            enc_t_teacher = models.encode_batch(tgt, teacher, mode="per_point")
        l_cons = ad.scalar_mul(
            consistency_loss(enc_t.pointwise, enc_t_teacher.pointwise.data),
            1.0 / (2 * feat_dim))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    weighted = ad.scalar_mul(ad.add(l_s, l_soft), lam)
    total = ad.add(ad.add(weighted, l_t), l_cons)
    return LossBreakdown(
        l_s=l_s.item(), l_soft=l_soft.item(), l_t=l_t.item(),
        l_cons=l_cons.item(), total=total.item(), lam=float(lam),
        total_tensor=total)
