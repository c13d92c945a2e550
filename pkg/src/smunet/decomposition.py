"""Style/content decomposition of encoder activations and style re-calibration.

Style is read from every encoder block (shallow and deep taps); content is
the bottleneck.  Only the missing-modality path is ever passed through
:class:`StyleModifier`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .conv import Conv3d
from .unet import EncoderFeatures, UNet

STYLE_VARIANTS = ("distribution", "adversarial", "texture")


@dataclass
class StyleRepresentation:
    layers: list[torch.Tensor]

    @property
    def channels(self) -> list[int]:
        return [t.shape[1] for t in self.layers]

    @property
    def sizes(self) -> list[int]:
        return [t[0, 0].numel() for t in self.layers]

    def detach(self) -> "StyleRepresentation":
        return StyleRepresentation([t.detach() for t in self.layers])

    def __len__(self):
        return len(self.layers)


@dataclass
class ContentRepresentation:
    tensor: torch.Tensor

    def detach(self) -> "ContentRepresentation":
        return ContentRepresentation(self.tensor.detach())


def extract_style(features: EncoderFeatures) -> StyleRepresentation:
    return StyleRepresentation(list(features.per_block))


def extract_content(features: EncoderFeatures) -> ContentRepresentation:
    return ContentRepresentation(features.per_block[-1])


class StyleModifier(nn.Module):
    """Learned re-calibration of the missing path's style layers.

    ``distribution``: the latent sample is broadcast over space, concatenated
    to each layer and mapped back to the layer width by a 1x1x1 conv.
    ``adversarial`` / ``texture``: a per-layer linear head turns the layer's
    channel statistics into a channelwise scale and shift.

    Both forms are initialised to the identity.
    """

    def __init__(self, widths: list[int], variant: str, latent_dim: int = 16):
        super().__init__()
        if variant not in STYLE_VARIANTS:
            raise ValueError(f"unknown style variant {variant!r}; valid: {', '.join(STYLE_VARIANTS)}")
        self.variant = variant
        self.latent_dim = latent_dim
        self.widths = list(widths)
        if variant == "distribution":
            self.mixers = nn.ModuleList(Conv3d(w + latent_dim, w, 1) for w in widths)
        else:
            self.heads = nn.ModuleList(nn.Linear(2 * w, 2 * w) for w in widths)
        self.reset_identity()

    @torch.no_grad()
    def reset_identity(self):
        if self.variant == "distribution":
            for conv, w in zip(self.mixers, self.widths):
                conv.weight.zero_()
                conv.weight[:, :w] = torch.eye(w).view(w, w, 1, 1, 1)
                conv.bias.zero_()
        else:
            for head in self.heads:
                head.weight.zero_()
                head.bias.zero_()

    def forward(self, style: StyleRepresentation, signal) -> StyleRepresentation:
        if signal.variant != self.variant:
            raise ValueError(f"signal variant {signal.variant!r} does not match modifier {self.variant!r}")
        if len(style) != len(self.widths) or style.channels != self.widths:
            raise ValueError(f"style layer widths {style.channels} do not match modifier {self.widths}")
        if self.variant == "distribution":
            z = signal.z
            if z is None or z.shape[-1] != self.latent_dim:
                raise ValueError(f"distribution modifier needs a latent sample of size {self.latent_dim}")
            out = []
            for layer, conv in zip(style.layers, self.mixers):
                zmap = z.reshape(1, -1, 1, 1, 1).expand(layer.shape[0], -1, *layer.shape[2:])
                out.append(conv(torch.cat([layer, zmap.to(layer.dtype)], dim=1)))
            return StyleRepresentation(out)

        stats = signal.stats
        if stats is None or len(stats) != len(style):
            raise ValueError("affine modifier needs one statistics vector per style layer")
        out = []
        for layer, head, s, w in zip(style.layers, self.heads, stats, self.widths):
            if s.shape[-1] != 2 * w:
                raise ValueError(f"statistics of size {s.shape[-1]} do not match layer width {w}")
            params = head(s)
            scale = 1.0 + params[:, :w]
            shift = params[:, w:]
            out.append(layer * scale[:, :, None, None, None] + shift[:, :, None, None, None])
        return StyleRepresentation(out)


def modify_style(style_m: StyleRepresentation, signal, modifier: StyleModifier) -> StyleRepresentation:
    return modifier(style_m, signal)


def recombine(features: EncoderFeatures, modified_style: StyleRepresentation,
              content: ContentRepresentation, net: UNet) -> EncoderFeatures:
    """Fuse each encoder activation with its style layer for the decoder.

    The deepest level fuses the content map instead of the raw activation;
    the fused result becomes the decoder's bottleneck.
    """
    n = len(features.per_block)
    if len(modified_style) != n:
        raise ValueError(f"{len(modified_style)} style layers for {n} encoder levels")
    for i, (a, s) in enumerate(zip(features.per_block, modified_style.layers)):
        if a.shape != s.shape:
            raise ValueError(f"level {i}: activation {tuple(a.shape)} vs style {tuple(s.shape)}")
    if content.tensor.shape != features.per_block[-1].shape:
        raise ValueError("content map does not match the deepest encoder level")
    fused = [net.fuse(i, a, s) for i, (a, s) in
             enumerate(zip(features.per_block[:-1], modified_style.layers[:-1]))]
    fused.append(net.fuse(n - 1, content.tensor, modified_style.layers[-1]))
    return EncoderFeatures(fused, fused[-1])
