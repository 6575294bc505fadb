"""Joint two-branch training: decoupled augmentation, dual forward passes,
feature mixup, all losses, one shared optimizer update per batch, warmup +
polynomial LR schedule, CSV metrics and checkpointing.

The loop is sequential over steps; with cfg.deterministic set it runs
single-threaded so repeated runs with one seed are bit-reproducible.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .core import (
    ConfigError,
    LossReport,
    Modality,
    RGBDSample,
    TrainConfig,
    validate_config,
)
from .augmentation import augment_batch_decoupled
from .data import DatasetManifest, iterate_batches, load_samples, stack_batch
from .evaluation import evaluate_forward
from .losses import (
    aux_loss,
    contrastive_loss,
    feature_mixup,
    orthogonality_loss,
    pool_normalize,
    seg_loss,
    total_loss,
)
from .models import (
    AuxDecoder,
    ModalityNet,
    build_aux_decoder,
    build_modality_net,
    decode_aux,
    decode_main,
    forward_logits,
    load_checkpoint,
    load_components,
    save_checkpoint,
)

JOINT_CSV_COLUMNS = [
    "epoch", "lr",
    "seg_rgb", "seg_d", "orth_rgb", "orth_d",
    "con_rgb", "con_d", "aux_rgb", "aux_d",
    "total", "miou_rgb", "miou_d",
]
SIMPLE_CSV_COLUMNS = ["epoch", "lr", "loss", "miou"]


def modality_suffix(modality: Modality) -> str:
    return "rgb" if modality is Modality.RGB else "d"


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from lr_start to lr_target, then polynomial decay down
    to exactly 0 at the final epoch."""
    if epoch < 0 or epoch > cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.lr_start + (cfg.lr_target - cfg.lr_start) * frac
    if cfg.epochs == cfg.warmup_epochs:
        return cfg.lr_target
    frac = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_target * (1.0 - frac) ** cfg.poly_power


def setup_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.set_num_threads(1)


def build_net(cfg: TrainConfig, modality: Modality) -> ModalityNet:
    """Per-modality net with init seeded by (cfg.seed, modality) only, so the
    same net comes out whether or not the other branch is built."""
    return build_modality_net(modality, cfg, seed_name=f"net_{modality_suffix(modality)}")


def make_optimizer(cfg: TrainConfig, groups: dict[str, list]) -> torch.optim.Optimizer:
    param_groups = [{"params": params, "name": name} for name, params in groups.items()]
    return torch.optim.AdamW(
        param_groups,
        lr=cfg.lr_start,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class TrainState:
    cfg: TrainConfig
    net_rgb: ModalityNet
    net_d: ModalityNet
    aux: AuxDecoder
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    batch_in_epoch: int = 0

    def components(self) -> dict[str, torch.nn.Module]:
        return {
            "enc_rgb": self.net_rgb.encoder,
            "dec_rgb": self.net_rgb.decoder,
            "enc_d": self.net_d.encoder,
            "dec_d": self.net_d.decoder,
            "dec_aux": self.aux.decoder,
        }


def init_train_state(cfg: TrainConfig) -> TrainState:
    cfg = validate_config(cfg)
    setup_determinism(cfg)
    net_rgb = build_net(cfg, Modality.RGB)
    net_d = build_net(cfg, Modality.DEPTH)
    aux = build_aux_decoder(cfg)
    optimizer = make_optimizer(cfg, {
        "enc_rgb": list(net_rgb.encoder.parameters()),
        "enc_d": list(net_d.encoder.parameters()),
        "dec_rgb": list(net_rgb.decoder.parameters()),
        "dec_d": list(net_d.decoder.parameters()),
        "dec_aux": list(aux.parameters()),
    })
    return TrainState(cfg=cfg, net_rgb=net_rgb, net_d=net_d, aux=aux, optimizer=optimizer)


def _augment(cfg: TrainConfig, batch: Sequence[RGBDSample], epoch: int, batch_idx: int, decoupled: bool):
    return augment_batch_decoupled(
        batch,
        (cfg.seed, epoch, batch_idx),
        decoupled,
        scale_range=(cfg.aug_scale_min, cfg.aug_scale_max),
        jitter=cfg.aug_jitter,
    )


def train_step(state: TrainState, batch: Sequence[RGBDSample]) -> tuple[TrainState, LossReport]:
    """One full joint update: augment, encode both modalities, mixup, decode
    original and mixed volumes, all enabled losses, one optimizer step over
    every parameter group."""
    cfg = state.cfg
    if cfg.use_con and len(batch) < 2:
        raise ValueError("contrastive loss needs batch size >= 2")

    (x_rgb, y_rgb), (x_d, y_d) = _augment(
        cfg, batch, state.epoch, state.batch_in_epoch, cfg.use_decoupled_aug
    )
    state.net_rgb.train()
    state.net_d.train()
    state.aux.train()

    encoded = {}
    for name, net, x, y in (("rgb", state.net_rgb, x_rgb, y_rgb), ("d", state.net_d, x_d, y_d)):
        volume, skip = net.encode(x)
        encoded[name] = (net, volume, skip, y)

    terms: dict[str, torch.Tensor] = {}
    for name in ("rgb", "d"):
        net, volume, skip, y = encoded[name]
        other_volume = encoded["d" if name == "rgb" else "rgb"][1]
        logits = decode_main(net, volume.inv, volume.spc, skip)
        if cfg.use_mixup:
            mixed_inv = feature_mixup(volume.inv, other_volume.inv, cfg.mixup_lambda)
            logits_mix = decode_main(net, mixed_inv, volume.spc, skip)
        else:
            logits_mix = logits
        terms[f"seg_{name}"] = seg_loss(logits, logits_mix, y, cfg.ignore_index)
        if cfg.use_orth:
            terms[f"orth_{name}"] = orthogonality_loss(volume.inv, volume.spc)
        if cfg.use_aux:
            logits_inv = decode_aux(state.aux, volume.inv)
            logits_spc = decode_aux(state.aux, volume.spc)
            terms[f"aux_{name}"] = aux_loss(logits_inv, logits_spc, y, cfg.ignore_index)

    if cfg.use_con:
        p_rgb = pool_normalize(encoded["rgb"][1].inv, Modality.RGB)
        p_d = pool_normalize(encoded["d"][1].inv, Modality.DEPTH)
        terms["con_rgb"] = contrastive_loss(p_rgb, p_d, cfg.tau, cfg.con_include_positive)
        terms["con_d"] = contrastive_loss(p_d, p_rgb, cfg.tau, cfg.con_include_positive)

    for term_name, value in terms.items():
        if not torch.isfinite(value):
            raise RuntimeError(
                f"non-finite loss term {term_name!r} at epoch {state.epoch} step {state.step}"
            )

    total = total_loss(terms, cfg.toggles())
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    state.batch_in_epoch += 1

    report = LossReport(**{k: float(v.detach()) for k, v in terms.items()})
    report.total = report.term_sum()
    return state, report


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    history: list[dict] = field(default_factory=list)
    miou_rgb: float = float("nan")
    miou_d: float = float("nan")
    final_miou: float = float("nan")


def _resolve_samples(data, cfg: TrainConfig) -> list[RGBDSample]:
    if isinstance(data, DatasetManifest):
        if data.num_classes != cfg.num_classes:
            raise ConfigError(
                f"manifest declares {data.num_classes} classes but config says {cfg.num_classes}"
            )
        return load_samples(data)
    return list(data)


def _append_csv(path: Path, columns: list[str], row: dict) -> None:
    new_file = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if new_file:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in columns})


def _branch_forward(net: ModalityNet) -> Callable:
    def forward(batch):
        x_rgb, x_d, _ = stack_batch(batch)
        x = x_rgb if net.modality is Modality.RGB else x_d
        net.eval()
        return forward_logits(net, x)
    return forward


def _should_eval(cfg: TrainConfig, epoch: int) -> bool:
    return (epoch + 1) % max(cfg.eval_every, 1) == 0 or epoch == cfg.epochs - 1


def train(
    cfg: TrainConfig,
    train_data,
    eval_data=None,
    out_dir: str | Path = "runs/joint",
    resume: str | Path | None = None,
) -> TrainResult:
    """Run the full joint procedure for cfg.epochs epochs.

    Returns the deployable per-modality models in the final checkpoint (the
    auxiliary decoder is saved too but is training-only). eval_data, when
    given, is scored per epoch with both single-modality branches.
    """
    cfg = validate_config(cfg)
    setup_determinism(cfg)
    train_samples = _resolve_samples(train_data, cfg)
    eval_samples = _resolve_samples(eval_data, cfg) if eval_data is not None else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    state = init_train_state(cfg)
    start_epoch = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["kind"] != "joint":
            raise ConfigError(f"cannot resume joint training from {payload['kind']!r} checkpoint")
        load_components(payload, state.components())
        if payload["optimizer"] is not None:
            state.optimizer.load_state_dict(payload["optimizer"])
        state.step = payload["step"]
        start_epoch = payload["epoch"] + 1

    result = TrainResult(checkpoint_path=out / "checkpoint_final.pt", metrics_path=metrics_path)
    for epoch in range(start_epoch, cfg.epochs):
        state.epoch = epoch
        state.batch_in_epoch = 0
        lr = lr_at(epoch, cfg)
        set_lr(state.optimizer, lr)

        sums: dict[str, float] = {}
        n_batches = 0
        for batch in iterate_batches(train_samples, cfg.batch_size, cfg.seed, epoch):
            state, report = train_step(state, batch)
            for key, value in report.as_dict().items():
                sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        if n_batches == 0:
            raise ConfigError("training set is smaller than one batch (partial batches are dropped)")

        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / n_batches for k, v in sums.items()})
        if eval_samples is not None and _should_eval(cfg, epoch):
            result.miou_rgb, _, _ = evaluate_forward(
                _branch_forward(state.net_rgb), eval_samples, cfg.num_classes,
                cfg.batch_size, cfg.ignore_index)
            result.miou_d, _, _ = evaluate_forward(
                _branch_forward(state.net_d), eval_samples, cfg.num_classes,
                cfg.batch_size, cfg.ignore_index)
        row["miou_rgb"], row["miou_d"] = result.miou_rgb, result.miou_d
        _append_csv(metrics_path, JOINT_CSV_COLUMNS, row)
        result.history.append(row)

        if (epoch + 1) % max(cfg.checkpoint_every, 1) == 0 and epoch != cfg.epochs - 1:
            save_checkpoint(
                out / f"checkpoint_{epoch:04d}.pt", state.components(), cfg,
                epoch, state.step, kind="joint", optimizer=state.optimizer)

    save_checkpoint(
        result.checkpoint_path, state.components(), cfg,
        cfg.epochs - 1, state.step, kind="joint", optimizer=state.optimizer)
    return result


# ---------------------------------------------------------------------------
# Shared loop for the single-model trainers (single-modality, fusion teacher,
# distilled student). Uses the same shuffling, coupled augmentation stream,
# LR schedule and checkpoint format as the joint loop so reductions of the
# joint procedure are step-for-step comparable.

def simple_training_loop(
    cfg: TrainConfig,
    train_samples: Sequence[RGBDSample],
    eval_samples,
    out_dir: str | Path,
    *,
    kind: str,
    components: dict[str, torch.nn.Module],
    step_loss: Callable,
    eval_forward: Callable | None,
    train_modules: Sequence[torch.nn.Module],
) -> TrainResult:
    cfg = validate_config(cfg)
    setup_determinism(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    optimizer = make_optimizer(
        cfg, {name: list(module.parameters()) for name, module in components.items()}
    )

    result = TrainResult(checkpoint_path=out / "checkpoint_final.pt", metrics_path=metrics_path)
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        set_lr(optimizer, lr)
        total, n_batches = 0.0, 0
        for batch_idx, batch in enumerate(
            iterate_batches(train_samples, cfg.batch_size, cfg.seed, epoch)
        ):
            for module in train_modules:
                module.train()
            loss = step_loss(batch, epoch, batch_idx)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch} step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss)
            n_batches += 1
            step += 1
        if n_batches == 0:
            raise ConfigError("training set is smaller than one batch (partial batches are dropped)")

        row = {"epoch": epoch, "lr": lr, "loss": total / n_batches, "miou": float("nan")}
        if eval_samples is not None and eval_forward is not None and _should_eval(cfg, epoch):
            result.final_miou, _, _ = evaluate_forward(
                eval_forward, eval_samples, cfg.num_classes, cfg.batch_size, cfg.ignore_index)
        row["miou"] = result.final_miou
        _append_csv(metrics_path, SIMPLE_CSV_COLUMNS, row)
        result.history.append(row)

        if (epoch + 1) % max(cfg.checkpoint_every, 1) == 0 and epoch != cfg.epochs - 1:
            save_checkpoint(out / f"checkpoint_{epoch:04d}.pt", components, cfg,
                            epoch, step, kind=kind, optimizer=optimizer)

    save_checkpoint(result.checkpoint_path, components, cfg,
                    cfg.epochs - 1, step, kind=kind, optimizer=optimizer)
    return result


def train_baseline_kd(
    cfg: TrainConfig,
    teacher_checkpoint: str | Path,
    modality: Modality,
    alpha: float,
    train_data,
    eval_data=None,
    out_dir: str | Path = "runs/kd",
) -> TrainResult:
    """Train one single-modality student against a frozen fusion teacher's
    soft labels, weighted alpha * CE + (1 - alpha) * KL."""
    from .baseline import restore_teacher
    from .losses import kd_loss

    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    cfg = validate_config(cfg)
    setup_determinism(cfg)
    payload = load_checkpoint(teacher_checkpoint)
    if payload["kind"] != "teacher":
        raise ConfigError(f"expected a teacher checkpoint, got kind {payload['kind']!r}")
    teacher_cfg = payload["config"]
    if teacher_cfg.backbone != cfg.backbone or teacher_cfg.num_classes != cfg.num_classes:
        raise ConfigError(
            "teacher/student mismatch: teacher is %s/%d classes, student %s/%d"
            % (teacher_cfg.backbone, teacher_cfg.num_classes, cfg.backbone, cfg.num_classes)
        )
    teacher = restore_teacher(payload)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    student = build_net(cfg, modality)
    suffix = modality_suffix(modality)
    train_samples = _resolve_samples(train_data, cfg)
    eval_samples = _resolve_samples(eval_data, cfg) if eval_data is not None else None

    def step_loss(batch, epoch, batch_idx):
        (x_rgb, y), (x_d, _) = _augment(cfg, batch, epoch, batch_idx, decoupled=False)
        x = x_rgb if modality is Modality.RGB else x_d
        logits = forward_logits(student, x)
        with torch.no_grad():
            teacher_logits = teacher(x_rgb, x_d)
        return kd_loss(logits, teacher_logits, y, alpha, cfg.ignore_index)

    return simple_training_loop(
        cfg, train_samples, eval_samples, out_dir,
        kind=f"kd_{suffix}",
        components={f"enc_{suffix}": student.encoder, f"dec_{suffix}": student.decoder},
        step_loss=step_loss,
        eval_forward=_branch_forward(student),
        train_modules=[student],
    )
