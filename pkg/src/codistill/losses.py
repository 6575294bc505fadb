"""Differentiable training objectives.

All operations are pure functions of channel-last tensors and may be
evaluated concurrently. Scalar losses are returned as 0-dim tensors so
gradients flow; call .item() for reporting.
"""
from __future__ import annotations

from typing import Mapping

import torch
import torch.nn.functional as F

from .core import IGNORE_INDEX, Modality, PooledEmbedding, SegLogits

# Denominator guard for cosine similarity and L2 normalization; zero
# feature vectors occur at init and must stay finite.
EPS = 1e-8
# Floor on squared pairwise distances: keeps sqrt differentiable when two
# pooled embeddings coincide without changing any distance above 1e-6.
_DIST_SQ_FLOOR = 1e-12


def feature_mixup(z_own: torch.Tensor, z_other: torch.Tensor, lam: float) -> torch.Tensor:
    """Blend the other modality's invariant half into this modality's.

    Returns lam * z_other + (1 - lam) * z_own; lam weights the OTHER
    modality, so lam=0 is the identity and lam=1 the full swap.
    """
    if z_own.shape != z_other.shape:
        raise ValueError(
            f"mixup shape mismatch: {tuple(z_own.shape)} vs {tuple(z_other.shape)}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must lie in [0, 1], got {lam}")
    return lam * z_other + (1.0 - lam) * z_own


def _pixel_ce(logits: SegLogits, labels: torch.Tensor, ignore_index: int) -> torch.Tensor:
    """Pixel-wise cross entropy averaged over non-ignored pixels."""
    if logits.shape[:3] != labels.shape:
        raise ValueError(
            f"logits spatial dims {tuple(logits.shape[:3])} do not match labels {tuple(labels.shape)}"
        )
    if not (labels != ignore_index).any():
        raise ValueError("no non-ignored pixels to score")
    return F.cross_entropy(
        logits.permute(0, 3, 1, 2), labels, ignore_index=ignore_index
    )


def seg_loss(
    logits: SegLogits,
    logits_mix: SegLogits,
    labels: torch.Tensor,
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """Segmentation loss: mean of the plain and the mixup-decoded CE terms.

    With mixup disabled callers pass the same logits twice, which reduces
    exactly to a single cross entropy.
    """
    ce_plain = _pixel_ce(logits, labels, ignore_index)
    ce_mix = _pixel_ce(logits_mix, labels, ignore_index)
    return 0.5 * (ce_plain + ce_mix)


def orthogonality_loss(inv: torch.Tensor, spc: torch.Tensor) -> torch.Tensor:
    """Signed cosine between the invariant and specific vector at every
    spatial location, summed over locations and averaged over the batch.

    Bounded in [-h*w, h*w]; zero-vector locations contribute 0 through the
    epsilon guard.
    """
    if inv.shape != spc.shape:
        raise ValueError(
            f"inv/spc shape mismatch: {tuple(inv.shape)} vs {tuple(spc.shape)}"
        )
    dot = (inv * spc).sum(dim=-1)
    denom = (inv.norm(dim=-1) * spc.norm(dim=-1)).clamp_min(EPS)
    cos = dot / denom
    batch = inv.shape[0]
    return cos.sum() / batch


def pool_normalize(inv: torch.Tensor, modality: Modality = Modality.RGB) -> PooledEmbedding:
    """Spatially average-pool each sample's invariant half and L2-normalize."""
    if inv.ndim != 4:
        raise ValueError(f"expected B x h x w x F/2, got rank {inv.ndim}")
    rho = inv.mean(dim=(1, 2))
    p = rho / rho.norm(dim=-1, keepdim=True).clamp_min(EPS)
    return PooledEmbedding(p=p, modality=modality)


def _rows(p) -> torch.Tensor:
    return p.p if isinstance(p, PooledEmbedding) else p


def _pairwise_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)
    return torch.sqrt(sq.clamp_min(_DIST_SQ_FLOOR))


def contrastive_loss(
    p_anchor,
    p_other,
    tau: float,
    include_positive: bool = False,
) -> torch.Tensor:
    """InfoNCE over negative Euclidean distances between pooled embeddings.

    The positive pair is the same instance in the other modality; the
    denominator holds the j != i rows of BOTH modalities (the positive is
    excluded unless include_positive is set).
    """
    a, o = _rows(p_anchor), _rows(p_other)
    if a.shape != o.shape:
        raise ValueError(f"embedding shape mismatch: {tuple(a.shape)} vs {tuple(o.shape)}")
    batch = a.shape[0]
    if batch < 2:
        raise ValueError("contrastive loss needs batch size >= 2 for negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")

    d_aa = _pairwise_dist(a, a)
    d_ao = _pairwise_dist(a, o)
    pos = d_ao.diagonal()

    eye = torch.eye(batch, dtype=torch.bool, device=a.device)
    neg_aa = (-d_aa / tau).masked_fill(eye, float("-inf"))
    off_ao = (-d_ao / tau)
    if not include_positive:
        off_ao = off_ao.masked_fill(eye, float("-inf"))
    denom = torch.logsumexp(torch.cat([neg_aa, off_ao], dim=1), dim=1)
    return (pos / tau + denom).mean()


def aux_loss(
    logits_inv: SegLogits,
    logits_spc: SegLogits,
    labels: torch.Tensor,
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """Sum of the two per-half auxiliary cross-entropy terms."""
    return _pixel_ce(logits_inv, labels, ignore_index) + _pixel_ce(
        logits_spc, labels, ignore_index
    )


def kd_loss(
    student_logits: SegLogits,
    teacher_logits: SegLogits,
    labels: torch.Tensor,
    alpha: float,
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """Teacher/student distillation: alpha * CE(student, labels) plus
    (1 - alpha) * KL(teacher || student), averaged over non-ignored pixels.

    The teacher distribution is treated as fixed (no gradient). alpha=0
    skips the task CE entirely; alpha=1 skips the KL term.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            "student/teacher logits differ: %s vs %s"
            % (tuple(student_logits.shape), tuple(teacher_logits.shape))
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")

    loss = student_logits.new_zeros(())
    if alpha > 0.0:
        loss = loss + alpha * _pixel_ce(student_logits, labels, ignore_index)
    if alpha < 1.0:
        mask = labels != ignore_index
        if not mask.any():
            raise ValueError("no non-ignored pixels to score")
        log_s = F.log_softmax(student_logits, dim=-1)
        log_t = F.log_softmax(teacher_logits.detach(), dim=-1)
        kl_map = (log_t.exp() * (log_t - log_s)).sum(dim=-1)
        kl = kl_map[mask].mean()
        loss = loss + (1.0 - alpha) * kl
    return loss


def total_loss(terms: Mapping[str, torch.Tensor | float], toggles: Mapping[str, bool]):
    """Unweighted sum of the enabled per-modality terms.

    `terms` is keyed like LossReport (seg_rgb, orth_d, ...); toggled-off
    families contribute nothing even if present.
    """
    enabled = {
        "seg": True,
        "orth": toggles.get("use_orth", True),
        "con": toggles.get("use_con", True),
        "aux": toggles.get("use_aux", True),
    }
    total = 0.0
    for name, value in terms.items():
        family = name.rsplit("_", 1)[0]
        if enabled.get(family, False):
            total = total + value
    return total


def losscheck(write=print) -> bool:
    """Run the loss identity and gradient suite; True when every check passes.

    Emits one `<name> <value> <expected> <status>` line per check.
    """
    from .gradcheck import run_all_checks

    ok = True
    for name, value, expected, passed in run_all_checks():
        status = "PASS" if passed else "FAIL"
        write(f"{name} {value} {expected} {status}")
        ok = ok and passed
    return ok
