"""Per-modality encoder-decoder models and the shared auxiliary decoder.

Two presets are registered: "tiny" (4 conv stages, F=64, stride 8) for
desk-scale runs and tests, and "resnet50-dilated" (torchvision ResNet-50
with dilated stage 3/4 and a 1x1 projection to F=1024) as the documented
full-scale preset. Module boundaries exchange channel-last tensors; the
convolution stacks run channel-first internally.

Parameters are mutated only by the training loop; forward passes are
read-only and may run concurrently over disjoint batches.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import FeatureVolume, Modality, SegLogits, TrainConfig, config_from_dict, config_to_dict


def component_seed(master_seed: int, name: str) -> int:
    """Stable per-component seed so each net's init is independent of which
    other components a run constructs."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63 - 1)


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-run every submodule's default init under a private RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if hasattr(m, "reset_parameters"):
                m.reset_parameters()
    return module


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv_gn(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.GroupNorm(4, out_ch),
        nn.ReLU(inplace=True),
    )


class TinyEncoder(nn.Module):
    """Four conv stages, output width 64 at stride 8."""

    feature_channels = 64
    stride = 8

    def __init__(self, in_channels: int):
        super().__init__()
        self.stage1 = _conv_gn(in_channels, 32, stride=2)
        self.stage2 = _conv_gn(32, 48, stride=2)
        self.stage3 = _conv_gn(48, 64, stride=2)
        self.stage4 = _conv_gn(64, 64, stride=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        f = self.stage4(self.stage3(self.stage2(self.stage1(x))))
        return f, None


class UpsampleHead(nn.Module):
    """Two-stage upsampling decoder: x4 then x2 back to input resolution."""

    def __init__(self, in_channels: int, num_classes: int, widths: tuple[int, int] = (48, 32)):
        super().__init__()
        self.in_channels = in_channels
        w1, w2 = widths
        self.refine1 = _conv_gn(in_channels, w1)
        self.refine2 = _conv_gn(w1, w2)
        self.classify = nn.Conv2d(w2, num_classes, 1)

    def forward(self, f: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        x = F.interpolate(f, scale_factor=4, mode="bilinear", align_corners=False)
        x = self.refine1(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.refine2(x)
        return self.classify(x)


class Aspp(nn.Module):
    """Atrous spatial pyramid pooling block (1x1, three dilated 3x3, image pool)."""

    def __init__(self, in_channels: int, out_channels: int = 256, rates=(6, 12, 18)):
        super().__init__()
        branches = [nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, bias=False),
                                  nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))]
        for rate in rates:
            branches.append(nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 3, padding=rate, dilation=rate, bias=False),
                nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True)))
        self.branches = nn.ModuleList(branches)
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * (len(branches) + 1), out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels), nn.ReLU(inplace=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [branch(x) for branch in self.branches]
        pooled = self.image_pool(x)
        outs.append(F.interpolate(pooled, size=x.shape[-2:], mode="bilinear", align_corners=False))
        return self.project(torch.cat(outs, dim=1))


class AsppDecoder(nn.Module):
    """DeepLabV3+-shaped head: ASPP plus one low-level skip refinement."""

    def __init__(self, in_channels: int, num_classes: int, skip_channels: int = 256):
        super().__init__()
        self.in_channels = in_channels
        self.aspp = Aspp(in_channels)
        self.skip_project = nn.Sequential(
            nn.Conv2d(skip_channels, 48, 1, bias=False),
            nn.BatchNorm2d(48), nn.ReLU(inplace=True))
        self.fuse = nn.Sequential(_conv_gn(256 + 48, 256), _conv_gn(256, 256))
        self.no_skip_fuse = nn.Sequential(_conv_gn(256, 256))
        self.classify = nn.Conv2d(256, num_classes, 1)

    def forward(self, f: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        x = self.aspp(f)
        if skip is not None:
            low = self.skip_project(skip)
            x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
            x = self.fuse(torch.cat([x, low], dim=1))
            out_scale = 4
        else:
            x = self.no_skip_fuse(x)
            out_scale = 8
        x = self.classify(x)
        return F.interpolate(x, scale_factor=out_scale, mode="bilinear", align_corners=False)


class ResNetDilatedEncoder(nn.Module):
    """ResNet-50 backbone, stages 3/4 dilated (overall stride 8), followed by
    a 1x1 projection from 2048 to 1024 channels with batch norm and ReLU.

    Exposes the stage-1 activation (256 channels, stride 4) as the decoder
    skip feature.
    """

    feature_channels = 1024
    stride = 8
    skip_channels = 256

    def __init__(self, in_channels: int):
        super().__init__()
        from torchvision.models import resnet50

        backbone = resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
        if in_channels != 3:
            backbone.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.backbone = backbone
        self.project = nn.Sequential(
            nn.Conv2d(2048, 1024, 1, bias=False),
            nn.BatchNorm2d(1024), nn.ReLU(inplace=True))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b = self.backbone
        x = b.maxpool(b.relu(b.bn1(b.conv1(x))))
        skip = b.layer1(x)
        f = b.layer4(b.layer3(b.layer2(skip)))
        return self.project(f), skip


@dataclass(frozen=True)
class Preset:
    name: str
    feature_channels: int
    stride: int
    make_encoder: Callable[[int], nn.Module]
    make_main_decoder: Callable[[int, int], nn.Module]
    make_aux_decoder: Callable[[int, int], nn.Module]


PRESETS = {
    "tiny": Preset(
        name="tiny",
        feature_channels=64,
        stride=8,
        make_encoder=TinyEncoder,
        make_main_decoder=lambda in_ch, c: UpsampleHead(in_ch, c, widths=(48, 32)),
        make_aux_decoder=lambda in_ch, c: UpsampleHead(in_ch, c, widths=(24, 16)),
    ),
    "resnet50-dilated": Preset(
        name="resnet50-dilated",
        feature_channels=1024,
        stride=8,
        make_encoder=ResNetDilatedEncoder,
        make_main_decoder=lambda in_ch, c: AsppDecoder(in_ch, c),
        make_aux_decoder=lambda in_ch, c: UpsampleHead(in_ch, c, widths=(128, 64)),
    ),
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ValueError(f"unknown backbone preset {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name]


class ModalityNet(nn.Module):
    """One single-modality model: encoder plus main decoder."""

    def __init__(self, modality: Modality, preset: str, num_classes: int):
        super().__init__()
        spec = get_preset(preset)
        if spec.feature_channels % 2 != 0:
            raise ValueError("encoder output width must be even to split in halves")
        self.modality = modality
        self.preset = spec
        self.num_classes = num_classes
        self.encoder = spec.make_encoder(modality.in_channels)
        self.decoder = spec.make_main_decoder(spec.feature_channels, num_classes)

    @property
    def feature_channels(self) -> int:
        return self.preset.feature_channels

    def encode(self, x: torch.Tensor) -> tuple[FeatureVolume, torch.Tensor | None]:
        """Channel-last batch in, split feature volume (and skip feature) out."""
        volume, skip = _encode_impl(self, x)
        return volume, skip


class AuxDecoder(nn.Module):
    """Training-only decoder over a single embedding half; one parameter set
    shared across both modalities and both halves."""

    def __init__(self, preset: str, num_classes: int):
        super().__init__()
        spec = get_preset(preset)
        self.preset = spec
        self.half_channels = spec.feature_channels // 2
        self.decoder = spec.make_aux_decoder(self.half_channels, num_classes)


def build_modality_net(modality: Modality, cfg: TrainConfig, seed_name: str | None = None) -> ModalityNet:
    net = ModalityNet(modality, cfg.backbone, cfg.num_classes)
    name = seed_name or f"net_{modality.value}"
    return seeded_init(net, component_seed(cfg.seed, name))


def build_aux_decoder(cfg: TrainConfig) -> AuxDecoder:
    aux = AuxDecoder(cfg.backbone, cfg.num_classes)
    return seeded_init(aux, component_seed(cfg.seed, "dec_aux"))


def _to_channel_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _to_channel_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


def _encode_impl(net: ModalityNet, x: torch.Tensor) -> tuple[FeatureVolume, torch.Tensor | None]:
    if x.ndim != 4:
        raise ValueError(f"expected B x H x W x C input, got rank {x.ndim}")
    if x.shape[-1] != net.modality.in_channels:
        raise ValueError(
            f"{net.modality.value} net expects {net.modality.in_channels} input channels, got {x.shape[-1]}"
        )
    stride = net.preset.stride
    if x.shape[1] % stride or x.shape[2] % stride:
        raise ValueError(f"input dims {tuple(x.shape[1:3])} must be multiples of stride {stride}")
    raw, skip = net.encoder(_to_channel_first(x))
    raw = _to_channel_last(raw)
    half = raw.shape[-1] // 2
    volume = FeatureVolume(inv=raw[..., :half], spc=raw[..., half:], modality=net.modality)
    return volume, skip


def encode(net: ModalityNet, x: torch.Tensor) -> FeatureVolume:
    """Encode a channel-last batch into invariant/specific halves."""
    volume, _ = _encode_impl(net, x)
    return volume


def decode_main(
    net: ModalityNet,
    inv: torch.Tensor,
    spc: torch.Tensor,
    skip: torch.Tensor | None = None,
) -> SegLogits:
    """Decode the concatenated [inv : spc] volume to full-resolution logits."""
    if inv.shape != spc.shape:
        raise ValueError(f"inv/spc shape mismatch: {tuple(inv.shape)} vs {tuple(spc.shape)}")
    feat = torch.cat([inv, spc], dim=-1)
    expected = getattr(net.decoder, "in_channels", net.feature_channels)
    if feat.shape[-1] != expected:
        raise ValueError(
            f"decoder expects {expected} channels, got {feat.shape[-1]} after concatenation"
        )
    logits = net.decoder(_to_channel_first(feat), skip)
    return _to_channel_last(logits)


def forward_logits(net: ModalityNet, x: torch.Tensor) -> SegLogits:
    """Full single-branch pass: encode, then decode [inv : spc] (threading
    the skip feature on presets that produce one)."""
    volume, skip = _encode_impl(net, x)
    return decode_main(net, volume.inv, volume.spc, skip)


def decode_aux(aux: AuxDecoder, z_half: torch.Tensor) -> SegLogits:
    """Decode one embedding half to full-resolution logits."""
    if z_half.shape[-1] != aux.half_channels:
        raise ValueError(
            f"auxiliary decoder expects {aux.half_channels} channels, got {z_half.shape[-1]}"
        )
    logits = aux.decoder(_to_channel_first(z_half))
    return _to_channel_last(logits)


def adapt_first_layer(weights):
    """Average a k x k x 3 x n kernel over its input channels to k x k x 1 x n.

    Used when seeding a single-channel depth stem from three-channel
    pretrained weights.
    """
    if weights.ndim != 4 or weights.shape[2] != 3:
        raise ValueError(f"expected k x k x 3 x n kernel, got {tuple(weights.shape)}")
    if isinstance(weights, torch.Tensor):
        return weights.mean(dim=2, keepdim=True)
    return np.asarray(weights).mean(axis=2, keepdims=True)


def load_pretrained_encoder(
    net: ModalityNet, state_dict: dict, freeze_projection_bn: bool = False
) -> list[str]:
    """Optional hook: load pretrained RGB backbone weights into an encoder.

    For a depth net the first conv kernel is averaged down to one input
    channel. Returns the state-dict keys that were skipped. Batch-norm
    statistics of the 1x1 projection can be frozen via the flag.
    """
    backbone = getattr(net.encoder, "backbone", None)
    if backbone is None:
        raise ValueError(f"preset {net.preset.name!r} has no pretrained-weight slot")
    state = dict(state_dict)
    if net.modality is Modality.DEPTH and "conv1.weight" in state:
        w = state["conv1.weight"]  # torch layout: n x 3 x k x k
        state["conv1.weight"] = adapt_first_layer(w.permute(2, 3, 1, 0)).permute(3, 2, 0, 1)
    missing = backbone.load_state_dict(state, strict=False)
    if freeze_projection_bn:
        for m in net.encoder.project.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.eval()
                m.weight.requires_grad_(False)
                m.bias.requires_grad_(False)
    return list(missing.unexpected_keys)


# ---------------------------------------------------------------------------
# Checkpoint archive: parameter arrays under stable hierarchical names plus
# the config snapshot and epoch counter.

def save_checkpoint(
    path: str | Path,
    components: dict[str, nn.Module],
    cfg: TrainConfig,
    epoch: int,
    step: int = 0,
    kind: str = "joint",
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    params = {}
    for comp_name, module in components.items():
        for key, value in module.state_dict().items():
            params[f"{comp_name}/{key}"] = value.detach().cpu()
    payload = {
        "kind": kind,
        "epoch": epoch,
        "step": step,
        "config": config_to_dict(cfg),
        "params": params,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    payload["config"] = config_from_dict(payload["config"])
    return payload


def load_components(payload: dict, components: dict[str, nn.Module]) -> None:
    """Restore saved parameter arrays into the given live modules."""
    params = payload["params"]
    for comp_name, module in components.items():
        prefix = comp_name + "/"
        state = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        if not state:
            raise KeyError(f"checkpoint has no parameters under {comp_name!r}")
        module.load_state_dict(state)
