"""Identity and gradient verification suite for the loss operations.

Gradient checks compare autograd against central finite differences
(step 1e-5) on small float64 tensors and fail above 1e-4 relative error.
Backs the `losscheck` CLI subcommand.
"""
from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import torch

from . import losses
from .core import IGNORE_INDEX, Modality

FD_STEP = 1e-5
GRAD_TOL = 1e-4
VALUE_TOL = 1e-6


def finite_difference_grads(
    fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], step: float = FD_STEP
) -> list[torch.Tensor]:
    """Central-difference gradients of fn() w.r.t. every element of tensors.

    fn must read the tensors by reference; they are perturbed in place and
    restored. Intended for tiny float64 tensors only.
    """
    grads = []
    with torch.no_grad():
        for t in tensors:
            grad = torch.zeros_like(t)
            flat, gflat = t.reshape(-1), grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(fn())
                flat[i] = orig - step
                f_minus = float(fn())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(grad)
    return grads


def max_rel_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        err = (a - n).abs() / n.abs().clamp_min(1.0)
        worst = max(worst, float(err.max()))
    return worst


def gradient_check(
    fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], step: float = FD_STEP
) -> float:
    """Max relative error between autograd and finite-difference gradients."""
    for t in tensors:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    analytic = torch.autograd.grad(fn(), tensors)
    numeric = finite_difference_grads(fn, tensors, step)
    return max_rel_error(analytic, numeric)


def _small_labels(gen: torch.Generator, shape, num_classes: int) -> torch.Tensor:
    labels = torch.randint(0, num_classes, shape, generator=gen)
    labels[0, 0, 0] = IGNORE_INDEX
    return labels


Check = tuple[str, float, float, bool]


def _value_checks() -> Iterator[Check]:
    gen = torch.Generator().manual_seed(0)

    def emit(name: str, value: float, expected: float, tol: float = VALUE_TOL) -> Check:
        return name, value, expected, abs(value - expected) <= tol

    z = torch.randn(2, 3, 3, 4, generator=gen)
    w = torch.randn(2, 3, 3, 4, generator=gen)
    yield emit("mixup_lambda0_identity", float((losses.feature_mixup(z, w, 0.0) - z).abs().max()), 0.0)
    yield emit("mixup_lambda1_swap", float((losses.feature_mixup(z, w, 1.0) - w).abs().max()), 0.0)
    mixed = losses.feature_mixup(torch.zeros(1, 2, 2, 3), torch.ones(1, 2, 2, 3), 0.35)
    yield emit("mixup_lambda035_interp", float((mixed - 0.35).abs().max()), 0.0)

    labels4 = torch.randint(0, 4, (2, 4, 4), generator=gen)
    uniform = torch.zeros(2, 4, 4, 4)
    yield emit("seg_uniform_ln4", float(losses.seg_loss(uniform, uniform, labels4)), math.log(4.0))
    onehot = torch.nn.functional.one_hot(labels4, 4).double() * 100.0
    yield emit("seg_saturated_zero", float(losses.seg_loss(onehot, onehot, labels4)), 0.0)

    inv = torch.randn(2, 8, 8, 4, generator=gen)
    yield emit("orth_identical_hw", float(losses.orthogonality_loss(inv, inv.clone())), 64.0)
    e1 = torch.zeros(2, 8, 8, 4)
    e1[..., 0] = 1.0
    e2 = torch.zeros(2, 8, 8, 4)
    e2[..., 1] = 1.0
    yield emit("orth_orthogonal_zero", float(losses.orthogonality_loss(e1, e2)), 0.0)
    yield emit("orth_negated_minus_hw", float(losses.orthogonality_loss(inv, -inv)), -64.0)

    const = torch.zeros(1, 2, 2, 2)
    const[..., 0], const[..., 1] = 3.0, 4.0
    pooled = losses.pool_normalize(const)
    yield emit("pool_constant_dir0", float(pooled.p[0, 0]), 0.6)
    yield emit("pool_constant_dir1", float(pooled.p[0, 1]), 0.8)
    rand_pool = losses.pool_normalize(torch.randn(3, 4, 4, 5, generator=gen))
    yield emit("pool_unit_rows", float(rand_pool.p.norm(dim=-1).sub(1.0).abs().max()), 0.0)

    same2 = torch.zeros(2, 3)
    same2[:, 0] = 1.0
    yield emit("con_degenerate_b2_ln2", float(losses.contrastive_loss(same2, same2.clone(), 0.07)), math.log(2.0))
    same5 = torch.zeros(5, 3)
    same5[:, 0] = 1.0
    yield emit("con_degenerate_b5", float(losses.contrastive_loss(same5, same5.clone(), 0.07)), math.log(8.0))

    yield emit("aux_uniform_2ln4", float(losses.aux_loss(uniform, uniform, labels4)), 2.0 * math.log(4.0))
    yield emit("aux_saturated_zero", float(losses.aux_loss(onehot, onehot, labels4)), 0.0)

    student = torch.randn(2, 3, 3, 3, generator=gen)
    teacher = torch.randn(2, 3, 3, 3, generator=gen)
    labels3 = torch.randint(0, 3, (2, 3, 3), generator=gen)
    ce_only = losses.kd_loss(student, teacher, labels3, alpha=1.0)
    plain_ce = losses.seg_loss(student, student, labels3)
    yield emit("kd_alpha1_equals_ce", float((ce_only - plain_ce).abs()), 0.0)
    yield emit("kd_identical_alpha0_zero", float(losses.kd_loss(student, student.clone(), labels3, alpha=0.0)), 0.0)

    terms = {name: float(i + 1) for i, name in enumerate(
        ("con_rgb", "con_d", "seg_rgb", "seg_d", "orth_rgb", "orth_d", "aux_rgb", "aux_d"))}
    all_on = {"use_orth": True, "use_con": True, "use_aux": True}
    yield emit("total_terms_1to8", float(losses.total_loss(terms, all_on)), 36.0)
    yield emit("total_all_zero", float(losses.total_loss({k: 0.0 for k in terms}, all_on)), 0.0)
    no_aux = dict(all_on, use_aux=False)
    yield emit("total_without_aux", float(losses.total_loss(terms, no_aux)), 36.0 - terms["aux_rgb"] - terms["aux_d"])


def _gradient_checks() -> Iterator[Check]:
    gen = torch.Generator().manual_seed(7)

    def rand(*shape):
        return torch.randn(*shape, dtype=torch.float64, generator=gen)

    labels = _small_labels(gen, (2, 3, 3), 3)

    logits, logits_mix = rand(2, 3, 3, 3), rand(2, 3, 3, 3)
    err = gradient_check(lambda: losses.seg_loss(logits, logits_mix, labels), [logits, logits_mix])
    yield "grad_seg_loss", err, GRAD_TOL, err < GRAD_TOL

    inv, spc = rand(2, 3, 3, 4), rand(2, 3, 3, 4)
    err = gradient_check(lambda: losses.orthogonality_loss(inv, spc), [inv, spc])
    yield "grad_orthogonality_loss", err, GRAD_TOL, err < GRAD_TOL

    vol_a, vol_b = rand(2, 3, 3, 4), rand(2, 3, 3, 4)

    def con_through_pool():
        pa = losses.pool_normalize(vol_a, Modality.RGB)
        pb = losses.pool_normalize(vol_b, Modality.DEPTH)
        return losses.contrastive_loss(pa, pb, tau=0.07)

    err = gradient_check(con_through_pool, [vol_a, vol_b])
    yield "grad_contrastive_loss", err, GRAD_TOL, err < GRAD_TOL

    aux_i, aux_s = rand(2, 3, 3, 3), rand(2, 3, 3, 3)
    err = gradient_check(lambda: losses.aux_loss(aux_i, aux_s, labels), [aux_i, aux_s])
    yield "grad_aux_loss", err, GRAD_TOL, err < GRAD_TOL

    student, teacher = rand(2, 3, 3, 3), rand(2, 3, 3, 3)
    err = gradient_check(lambda: losses.kd_loss(student, teacher, labels, alpha=0.5), [student])
    yield "grad_kd_loss", err, GRAD_TOL, err < GRAD_TOL


def run_all_checks() -> Iterator[Check]:
    yield from _value_checks()
    yield from _gradient_checks()
