"""3D U-Net used for both the full-modality and the missing-modality path."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .conv import Conv3d

# Output channel order; index i of the logits scores LABELS[i].
LABELS = (0, 1, 2, 4)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    base_width: int = 8
    num_blocks: int = 4
    norm_groups: int = 8
    num_classes: int = 4

    def __post_init__(self):
        for name in ("in_channels", "base_width", "num_blocks", "norm_groups", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for w in self.widths:
            if w % self.norm_groups:
                raise ValueError(f"block width {w} not divisible by norm_groups={self.norm_groups}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.num_blocks)]

    @property
    def divisor(self) -> int:
        return 2 ** self.num_blocks

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderFeatures:
    """Pre-pooling activation of every encoder block, shallowest first.

    ``bottleneck`` is the deepest block's output, i.e. ``per_block[-1]``
    unless a recombination step replaced it.
    """

    per_block: list[torch.Tensor]
    bottleneck: torch.Tensor


def check_spatial(shape, config: UNetConfig):
    if any(s % config.divisor for s in shape):
        raise ValueError(f"spatial dims {tuple(shape)} must be divisible by {config.divisor}")


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__(
            Conv3d(cin, cout, 3, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(inplace=True),
            Conv3d(cout, cout, 3, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """Encoder/decoder with concatenating skips.

    Besides the usual layers every path owns one 1x1x1 fusion conv per
    level that merges an encoder activation with its (possibly modified)
    style layer; see :func:`smunet.decomposition.recombine`.  Fusion weights
    start as ``[I/2, I/2]`` so an unmodified style makes the fusion an exact
    identity.
    """

    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        self.config = config = config or UNetConfig()
        widths = config.widths
        g = config.norm_groups
        self.encoder = nn.ModuleList(
            ConvBlock(config.in_channels if i == 0 else widths[i - 1], widths[i], g)
            for i in range(config.num_blocks)
        )
        self.fusion = nn.ModuleList(Conv3d(2 * w, w, 1) for w in widths)
        self.up = nn.ModuleList(Conv3d(widths[i + 1], widths[i], 3, padding=1)
                                for i in range(config.num_blocks - 1))
        self.decoder = nn.ModuleList(ConvBlock(2 * widths[i], widths[i], g)
                                     for i in range(config.num_blocks - 1))
        self.head = Conv3d(widths[0], config.num_classes, 1)
        self.reset_fusion()

    @torch.no_grad()
    def reset_fusion(self, style_weight: float = 0.5):
        for conv in self.fusion:
            c = conv.out_channels
            eye = torch.eye(c, dtype=conv.weight.dtype).view(c, c, 1, 1, 1)
            conv.weight.zero_()
            conv.weight[:, :c] = (1.0 - style_weight) * eye
            conv.weight[:, c:] = style_weight * eye
            conv.bias.zero_()

    def encode(self, x: torch.Tensor) -> EncoderFeatures:
        check_spatial(x.shape[2:], self.config)
        feats = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.max_pool3d(x, 2)
            x = block(x)
            feats.append(x)
        return EncoderFeatures(feats, feats[-1])

    def fuse(self, level: int, activation: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        return self.fusion[level](torch.cat([activation, style], dim=1))

    def decode(self, features: EncoderFeatures) -> torch.Tensor:
        skips = features.per_block
        if len(skips) != self.config.num_blocks:
            raise ValueError(f"expected {self.config.num_blocks} encoder levels, got {len(skips)}")
        x = features.bottleneck
        if x.shape[1] != self.config.widths[-1]:
            raise ValueError(f"bottleneck has {x.shape[1]} channels, expected {self.config.widths[-1]}")
        for i in reversed(range(self.config.num_blocks - 1)):
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            if x.shape[2:] != skips[i].shape[2:]:
                raise ValueError(f"scale mismatch at level {i}: {tuple(x.shape[2:])} vs {tuple(skips[i].shape[2:])}")
            x = self.decoder[i](torch.cat([self.up[i](x), skips[i]], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Plain segmentation: recombine with the unmodified style, then decode."""
        feats = self.encode(x)
        fused = [self.fuse(i, a, a) for i, a in enumerate(feats.per_block)]
        return self.decode(EncoderFeatures(fused, fused[-1]))


def encode(volume: torch.Tensor, net: UNet) -> EncoderFeatures:
    return net.encode(_batched(volume))


def decode(features: EncoderFeatures, net: UNet) -> torch.Tensor:
    return net.decode(features)


def forward_segmentation(volume: torch.Tensor, net: UNet) -> torch.Tensor:
    return net(_batched(volume))


def _batched(volume: torch.Tensor) -> torch.Tensor:
    return volume.unsqueeze(0) if volume.dim() == 4 else volume


def logits_to_labels(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the class axis mapped back to label values {0, 1, 2, 4}."""
    lut = torch.tensor(LABELS, dtype=torch.uint8, device=logits.device)
    return lut[logits.argmax(dim=-4)]


def conv_parameter_count(config: UNetConfig) -> int:
    """Closed-form count of convolution weights and biases in :class:`UNet`."""
    def conv(k, cin, cout):
        return k ** 3 * cin * cout + cout

    w = config.widths
    total = 0
    for i in range(config.num_blocks):
        cin = config.in_channels if i == 0 else w[i - 1]
        total += conv(3, cin, w[i]) + conv(3, w[i], w[i])
        total += conv(1, 2 * w[i], w[i])
    for i in range(config.num_blocks - 1):
        total += conv(3, w[i + 1], w[i])
        total += conv(3, 2 * w[i], w[i]) + conv(3, w[i], w[i])
    total += conv(1, w[0], config.num_classes)
    return total
