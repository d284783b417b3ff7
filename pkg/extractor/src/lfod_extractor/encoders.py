"""Stage-tapped CNN encoders with global average pooling.

Each encoder exposes a fixed list of taps, one per spatial scale, taken at
the last block of that scale. Selecting stages 1..k picks a prefix of the
tap list; the pooled channel vectors concatenate into one flat feature
vector per image, in stage order.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torchvision import models
from torchvision.transforms import InterpolationMode, transforms

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class StageTap:
    """One extraction point: a named module whose output feeds the pool."""

    stage: int
    module: str
    channels: int
    scale: int  # total downsampling factor at this tap


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    taps: tuple[StageTap, ...]
    default_stages: tuple[int, ...]
    resize: int
    crop: int
    interpolation: InterpolationMode

    def select(self, stages: tuple[int, ...]) -> tuple[StageTap, ...]:
        by_stage = {t.stage: t for t in self.taps}
        unknown = [s for s in stages if s not in by_stage]
        if unknown:
            raise ValueError(
                f"{self.name} has stages {sorted(by_stage)}, got {unknown}")
        if len(set(stages)) != len(stages):
            raise ValueError(f"duplicate stage indices: {list(stages)}")
        return tuple(by_stage[s] for s in stages)

    def preprocess(self) -> transforms.Compose:
        return transforms.Compose([
            transforms.Resize(self.resize, interpolation=self.interpolation),
            transforms.CenterCrop(self.crop),
            transforms.ToTensor(),
            transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD),
        ])


# EfficientNet-b4 taps sit at the last MBConv block of each resolution
# scale (/2, /4, /8, /16, /32); their channel widths sum to 720.
EFFICIENTNET_B4 = EncoderSpec(
    name="efficientnet_b4",
    taps=(
        StageTap(1, "features.1", 24, 2),
        StageTap(2, "features.2", 32, 4),
        StageTap(3, "features.3", 56, 8),
        StageTap(4, "features.5", 160, 16),
        StageTap(5, "features.7", 448, 32),
    ),
    default_stages=(1, 2, 3, 4, 5),
    resize=384,
    crop=380,
    interpolation=InterpolationMode.BICUBIC,
)

RESNET50 = EncoderSpec(
    name="resnet50",
    taps=(
        StageTap(1, "layer1", 256, 4),
        StageTap(2, "layer2", 512, 8),
        StageTap(3, "layer3", 1024, 16),
        StageTap(4, "layer4", 2048, 32),
    ),
    default_stages=(1, 2, 3),
    resize=256,
    crop=224,
    interpolation=InterpolationMode.BILINEAR,
)

ENCODERS: dict[str, EncoderSpec] = {
    EFFICIENTNET_B4.name: EFFICIENTNET_B4,
    RESNET50.name: RESNET50,
}


def global_average_pool(feature_map: torch.Tensor) -> torch.Tensor:
    """Spatial mean of a (B, C, H, W) map, giving (B, C)."""
    if feature_map.dim() != 4:
        raise ValueError(f"expected a 4-d feature map, got {tuple(feature_map.shape)}")
    return feature_map.mean(dim=(2, 3))


class TappedEncoder(torch.nn.Module):
    """Frozen backbone that returns pooled vectors at the selected taps."""

    def __init__(self, spec: EncoderSpec, stages: tuple[int, ...],
                 pretrained: bool = True):
        super().__init__()
        self.spec = spec
        self.taps = spec.select(stages)
        self.backbone = _build_backbone(spec.name, pretrained)
        self.backbone.eval()
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        # run only as deep as the last selected tap
        self._stop_module = self.taps[-1].module

    @torch.no_grad()
    def forward(self, batch: torch.Tensor) -> list[torch.Tensor]:
        wanted = {t.module for t in self.taps}
        found: dict[str, torch.Tensor] = {}
        x = batch
        for name, module in _trunk_modules(self.backbone, self.spec.name):
            x = module(x)
            if name in wanted:
                found[name] = global_average_pool(x)
            if name == self._stop_module:
                break
        return [found[t.module] for t in self.taps]


def _build_backbone(name: str, pretrained: bool) -> torch.nn.Module:
    if name == "efficientnet_b4":
        weights = models.EfficientNet_B4_Weights.IMAGENET1K_V1 if pretrained else None
        return models.efficientnet_b4(weights=weights)
    if name == "resnet50":
        weights = models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        return models.resnet50(weights=weights)
    raise ValueError(f"unknown encoder {name!r}")


def _trunk_modules(backbone: torch.nn.Module, name: str):
    """Yield (tap-name, module) pairs along the backbone trunk, in order."""
    if name == "efficientnet_b4":
        for i, block in enumerate(backbone.features):
            yield f"features.{i}", block
    elif name == "resnet50":
        yield "stem.conv1", backbone.conv1
        yield "stem.bn1", backbone.bn1
        yield "stem.relu", backbone.relu
        yield "stem.maxpool", backbone.maxpool
        for i in (1, 2, 3, 4):
            yield f"layer{i}", getattr(backbone, f"layer{i}")
    else:
        raise ValueError(f"unknown encoder {name!r}")
