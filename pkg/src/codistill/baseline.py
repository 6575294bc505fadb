"""Fusion teacher and single-modality baselines.

The teacher concatenates the two encoders' feature volumes and decodes the
fused 2F-channel block; it exists to exercise the teacher/student
distillation path at desk scale. Single-modality training is plain CE with
no cross-modal terms.
"""
from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from .core import Modality, TrainConfig, validate_config
from .models import (
    ModalityNet,
    component_seed,
    get_preset,
    load_components,
    seeded_init,
)
from .losses import seg_loss
from .training import (
    TrainResult,
    _augment,
    _branch_forward,
    _resolve_samples,
    build_net,
    modality_suffix,
    setup_determinism,
    simple_training_loop,
)
from . import models


class FusionTeacher(nn.Module):
    """Multimodal model: one encoder per modality, channel-concatenation
    fusion, one decoder over the doubled width. Requires the paired batch."""

    def __init__(self, preset: str, num_classes: int):
        super().__init__()
        spec = get_preset(preset)
        self.preset = spec
        self.num_classes = num_classes
        self.encoder_rgb = spec.make_encoder(3)
        self.encoder_d = spec.make_encoder(1)
        self.decoder = spec.make_main_decoder(2 * spec.feature_channels, num_classes)

    def forward(self, x_rgb: torch.Tensor, x_d: torch.Tensor) -> torch.Tensor:
        return teacher_forward(self, x_rgb, x_d)


def teacher_forward(teacher: FusionTeacher, x_rgb, x_d) -> torch.Tensor:
    """Logits from the concatenated encoder features of a paired batch."""
    if x_rgb is None or x_d is None:
        raise ValueError("fusion teacher requires both modalities")
    if x_rgb.ndim != 4 or x_d.ndim != 4 or x_rgb.shape[:3] != x_d.shape[:3]:
        raise ValueError(
            f"unpaired batch: rgb {tuple(x_rgb.shape)} vs depth {tuple(x_d.shape)}"
        )
    if x_rgb.shape[-1] != 3 or x_d.shape[-1] != 1:
        raise ValueError("teacher expects 3-channel RGB and 1-channel depth inputs")
    f_rgb, _ = teacher.encoder_rgb(x_rgb.permute(0, 3, 1, 2))
    f_d, _ = teacher.encoder_d(x_d.permute(0, 3, 1, 2))
    logits = teacher.decoder(torch.cat([f_rgb, f_d], dim=1))
    return logits.permute(0, 2, 3, 1)


def build_teacher(cfg: TrainConfig) -> FusionTeacher:
    teacher = FusionTeacher(cfg.backbone, cfg.num_classes)
    return seeded_init(teacher, component_seed(cfg.seed, "teacher"))


def teacher_components(teacher: FusionTeacher) -> dict[str, nn.Module]:
    return {
        "enc_rgb": teacher.encoder_rgb,
        "enc_d": teacher.encoder_d,
        "dec_fuse": teacher.decoder,
    }


def train_teacher(
    cfg: TrainConfig, train_data, eval_data=None, out_dir: str | Path = "runs/teacher"
) -> TrainResult:
    """CE-only training of the fusion teacher on shared-transform batches."""
    cfg = validate_config(cfg)
    setup_determinism(cfg)
    teacher = build_teacher(cfg)
    train_samples = _resolve_samples(train_data, cfg)
    eval_samples = _resolve_samples(eval_data, cfg) if eval_data is not None else None

    def step_loss(batch, epoch, batch_idx):
        (x_rgb, y), (x_d, _) = _augment(cfg, batch, epoch, batch_idx, decoupled=False)
        logits = teacher_forward(teacher, x_rgb, x_d)
        return seg_loss(logits, logits, y, cfg.ignore_index)

    def eval_forward(batch):
        from .data import stack_batch

        x_rgb, x_d, _ = stack_batch(batch)
        teacher.eval()
        return teacher_forward(teacher, x_rgb, x_d)

    return simple_training_loop(
        cfg, train_samples, eval_samples, out_dir,
        kind="teacher",
        components=teacher_components(teacher),
        step_loss=step_loss,
        eval_forward=eval_forward,
        train_modules=[teacher],
    )


def train_single_modality(
    cfg: TrainConfig,
    train_data,
    modality: Modality,
    eval_data=None,
    out_dir: str | Path = "runs/single",
) -> TrainResult:
    """Plain CE training of one modality's encoder-decoder; equals the joint
    procedure with every cross-modal term disabled and the other branch
    removed."""
    cfg = validate_config(cfg)
    setup_determinism(cfg)
    net = build_net(cfg, modality)
    suffix = modality_suffix(modality)
    train_samples = _resolve_samples(train_data, cfg)
    eval_samples = _resolve_samples(eval_data, cfg) if eval_data is not None else None

    def step_loss(batch, epoch, batch_idx):
        (x_rgb, y), (x_d, _) = _augment(cfg, batch, epoch, batch_idx, decoupled=False)
        x = x_rgb if modality is Modality.RGB else x_d
        logits = models.forward_logits(net, x)
        return seg_loss(logits, logits, y, cfg.ignore_index)

    return simple_training_loop(
        cfg, train_samples, eval_samples, out_dir,
        kind=f"single_{suffix}",
        components={f"enc_{suffix}": net.encoder, f"dec_{suffix}": net.decoder},
        step_loss=step_loss,
        eval_forward=_branch_forward(net),
        train_modules=[net],
    )


# ---------------------------------------------------------------------------
# Checkpoint restoration for every checkpoint kind produced by the trainers.

def restore_teacher(payload: dict) -> FusionTeacher:
    cfg = payload["config"]
    teacher = FusionTeacher(cfg.backbone, cfg.num_classes)
    load_components(payload, teacher_components(teacher))
    return teacher


def restore_models(payload: dict) -> dict[str, nn.Module]:
    """Rebuild the modules stored in a checkpoint, keyed by branch name."""
    cfg = payload["config"]
    kind = payload["kind"]
    if kind == "joint":
        net_rgb = ModalityNet(Modality.RGB, cfg.backbone, cfg.num_classes)
        net_d = ModalityNet(Modality.DEPTH, cfg.backbone, cfg.num_classes)
        load_components(payload, {
            "enc_rgb": net_rgb.encoder, "dec_rgb": net_rgb.decoder,
            "enc_d": net_d.encoder, "dec_d": net_d.decoder,
        })
        return {"rgb": net_rgb, "depth": net_d}
    if kind == "teacher":
        return {"teacher": restore_teacher(payload)}
    if kind in ("single_rgb", "single_d", "kd_rgb", "kd_d"):
        modality = Modality.RGB if kind.endswith("rgb") else Modality.DEPTH
        suffix = modality_suffix(modality)
        net = ModalityNet(modality, cfg.backbone, cfg.num_classes)
        load_components(payload, {f"enc_{suffix}": net.encoder, f"dec_{suffix}": net.decoder})
        return {modality.value: net}
    raise ValueError(f"unknown checkpoint kind {kind!r}")
