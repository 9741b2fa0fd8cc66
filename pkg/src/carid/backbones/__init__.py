"""Backbone registry and transfer-learning surgery.

Six pretrained-capable trunks are registered. ``build_model`` loads one,
freezes it, and attaches a fresh Dropout+Linear head; optionally the final
backbone stage stays trainable. Each registry entry names its unfrozen
block explicitly so the freeze report can be audited against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import torch
from torch import nn

from .coat_lite import CoaTLiteMini
from .efficientnetv2 import EfficientNetV2B2
from .mobilevit import MobileViTS
from .swin_s3 import SwinS3Tiny


class UnknownBackbone(ValueError):
    pass


class PretrainedWeightsUnavailable(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    pretrained: bool = False
    unfreeze_last_block: bool = False
    feature_dim: int | None = None  # resolved from the registry by build_model


@dataclass(frozen=True)
class RegistryEntry:
    builder: Callable[[bool], nn.Module]
    feature_dim: int
    input_size: int  # native square resolution the trunk was designed for
    last_block: tuple[str, ...]  # parameter-name prefixes of the final stage


def _build_resnet50(pretrained: bool) -> nn.Module:
    from torchvision.models import ResNet50_Weights, resnet50

    weights = ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
    try:
        model = resnet50(weights=weights)
    except Exception as exc:
        raise PretrainedWeightsUnavailable(f"resnet50: {exc}") from exc
    model.fc = nn.Identity()
    return model


def _build_densenet161(pretrained: bool) -> nn.Module:
    from torchvision.models import DenseNet161_Weights, densenet161

    weights = DenseNet161_Weights.IMAGENET1K_V1 if pretrained else None
    try:
        model = densenet161(weights=weights)
    except Exception as exc:
        raise PretrainedWeightsUnavailable(f"densenet161: {exc}") from exc
    model.classifier = nn.Identity()
    return model


def _local_arch(cls: type[nn.Module], name: str) -> Callable[[bool], nn.Module]:
    def build(pretrained: bool) -> nn.Module:
        if pretrained:
            raise PretrainedWeightsUnavailable(
                f"{name}: no pretrained weights are distributed with this package"
            )
        return cls()

    return build


REGISTRY: dict[str, RegistryEntry] = {
    "resnet50": RegistryEntry(_build_resnet50, 2048, 224, ("layer4",)),
    "densenet161": RegistryEntry(
        _build_densenet161, 2208, 224, ("features.denseblock4", "features.norm5")
    ),
    "efficientnetv2_b2": RegistryEntry(
        _local_arch(EfficientNetV2B2, "efficientnetv2_b2"), 1408, 260, ("stages.5", "head")
    ),
    "mobilevit_s": RegistryEntry(
        _local_arch(MobileViTS, "mobilevit_s"), 640, 256, ("stages.4", "head")
    ),
    "swin_s3_tiny": RegistryEntry(
        _local_arch(SwinS3Tiny, "swin_s3_tiny"), 768, 224, ("stages.3", "norm")
    ),
    "coat_lite_mini": RegistryEntry(
        _local_arch(CoaTLiteMini, "coat_lite_mini"), 512, 224, ("stages.3", "norm")
    ),
}

BACKBONE_NAMES = tuple(REGISTRY)

_NORM_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d, nn.GroupNorm, nn.LayerNorm)


def get_entry(name: str) -> RegistryEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownBackbone(f"{name!r}; known: {', '.join(REGISTRY)}") from None


class FineTuneModel(nn.Module):
    """Frozen trunk + trainable Dropout/Linear head.

    train(True) keeps normalization layers inside frozen blocks in eval
    mode so their running statistics stay untouched: "frozen" covers both
    weights and statistics.
    """

    def __init__(self, backbone: nn.Module, head: nn.Sequential, spec: BackboneSpec,
                 num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.spec = spec
        self.num_classes = num_classes
        self._frozen_norms = [
            m for m in backbone.modules()
            if isinstance(m, _NORM_TYPES)
            and all(not p.requires_grad for p in m.parameters(recurse=False))
        ]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def train(self, mode: bool = True) -> "FineTuneModel":
        super().train(mode)
        if mode:
            for m in self._frozen_norms:
                m.eval()
        return self


def _calibrate_running_stats(backbone: nn.Module, input_size: int, seed: int) -> None:
    """Give freshly initialized batch-norm layers meaningful running stats.

    A trunk without upstream weights starts with running mean 0 / var 1,
    which bears no relation to its random conv outputs; frozen in eval
    mode that misscaling compounds layer by layer. A few seeded noise
    batches through train mode settle the cumulative averages so the
    frozen trunk produces sanely scaled features.
    """
    bns = [m for m in backbone.modules()
           if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    momenta = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative average over the calibration batches
    size = min(input_size, 96)
    gen = torch.Generator().manual_seed(seed)
    backbone.train()
    with torch.no_grad():
        for _ in range(4):
            # Low-pass noise: spatially correlated like natural images, so
            # conv responses are scaled realistically.
            coarse = torch.randn(8, 3, size // 8, size // 8, generator=gen)
            x = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bilinear",
                                                align_corners=False)
            x = x + 0.25 * torch.randn(8, 3, size, size, generator=gen)
            backbone(x)
    for bn, momentum in zip(bns, momenta):
        bn.momentum = momentum
    backbone.eval()


def calibrate_on_batches(model: "FineTuneModel", batches, max_batches: int = 4) -> None:
    """Estimate the trunk's batch-norm running statistics on real batches.

    For a pretrained trunk the frozen statistics describe its upstream
    corpus; a randomly initialized trunk has no such estimate, so this
    settles them on the target data once, before any training step. The
    statistics do not move afterwards.
    """
    bns = [m for m in model.backbone.modules()
           if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    momenta = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
        bn.train()
    with torch.no_grad():
        for i, batch in enumerate(batches):
            if i >= max_batches:
                break
            model.backbone(batch)
    for bn, momentum in zip(bns, momenta):
        bn.momentum = momentum
        bn.eval()
    model.eval()


def build_model(spec: BackboneSpec, num_classes: int, dropout_rate: float,
                seed: int = 0) -> FineTuneModel:
    """Load a registered trunk, freeze it, attach a fresh classifier head.

    The original classifier is removed by the builder; the new head is a
    Dropout followed by a Linear map to ``num_classes`` logits, bias zero
    and weights uniform at fan-in scale. Only the head (plus the final
    trunk stage when ``spec.unfreeze_last_block``) remains trainable.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    entry = get_entry(spec.name)
    spec = replace(spec, feature_dim=entry.feature_dim)

    # Builders draw initial weights from the global torch RNG; fork it so
    # the build is a pure function of (spec, num_classes, dropout, seed).
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        backbone = entry.builder(spec.pretrained)
    if not spec.pretrained:
        _calibrate_running_stats(backbone, entry.input_size, seed)
    for param in backbone.parameters():
        param.requires_grad = False
    if spec.unfreeze_last_block:
        for name, param in backbone.named_parameters():
            if name.startswith(entry.last_block):
                param.requires_grad = True

    head = nn.Sequential(nn.Dropout(dropout_rate), nn.Linear(entry.feature_dim, num_classes))
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(entry.feature_dim)
    with torch.no_grad():
        head[1].weight.uniform_(-bound, bound, generator=gen)
        head[1].bias.zero_()

    model = FineTuneModel(backbone, head, spec, num_classes)
    model.eval()
    return model


def expected_trainable_names(spec: BackboneSpec, model: FineTuneModel) -> set[str]:
    """Trainable tensor names implied by the registry declaration."""
    entry = get_entry(spec.name)
    names = {f"head.{n}" for n, _ in model.head.named_parameters()}
    if spec.unfreeze_last_block:
        names |= {
            f"backbone.{n}" for n, _ in model.backbone.named_parameters()
            if n.startswith(entry.last_block)
        }
    return names


def freeze_report(model: FineTuneModel) -> dict:
    trainable, frozen, names = 0, 0, []
    for name, param in model.named_parameters():
        if param.requires_grad:
            trainable += param.numel()
            names.append(name)
        else:
            frozen += param.numel()
    return {
        "trainable_params": trainable,
        "frozen_params": frozen,
        "trainable_tensors": names,
    }


def forward(model: FineTuneModel, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Run a batch through the model in the given mode.

    Train mode applies inverted dropout (surviving activations scaled by
    1/(1-p)) so the expectation over masks equals the eval output; eval
    mode is deterministic.
    """
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeMismatch(f"expected (n, 3, h, w), got {tuple(batch.shape)}")
    if batch.shape[2] < 32 or batch.shape[3] < 32:
        raise ShapeMismatch(f"input {batch.shape[2]}x{batch.shape[3]} below 32x32 minimum")
    if mode == "train":
        model.train()
        return model(batch)
    model.eval()
    with torch.no_grad():
        return model(batch)
