"""The three interchangeable style-matching mechanisms.

* distribution: Gaussian latent heads and a closed-form KL,
* adversarial: a discriminator over the deepest style layer,
* texture: Gram-matrix matching across all style layers.

Full-path style is always treated as a constant so matching only pulls the
missing path toward the full one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .conv import Conv3d
from .decomposition import STYLE_VARIANTS, StyleRepresentation

LOG_CLAMP = 1e-7


@dataclass
class GaussianStats:
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class MatchingSignal:
    variant: str
    z: torch.Tensor | None = None
    stats: list[torch.Tensor] | None = None

    def __post_init__(self):
        if self.variant not in STYLE_VARIANTS:
            raise ValueError(f"unknown style variant {self.variant!r}")


def _as_matrix(layer: torch.Tensor) -> torch.Tensor:
    if layer.dim() == 2:
        return layer
    if layer.dim() == 5:
        if layer.shape[0] != 1:
            raise ValueError("gram expects a single sample")
        layer = layer[0]
    return layer.reshape(layer.shape[0], -1)


def gram(layer: torch.Tensor) -> torch.Tensor:
    """``F @ F.T`` for the (channels x positions) flattening; unnormalised."""
    f = _as_matrix(layer)
    return f @ f.transpose(0, 1)


def texture_loss(style_f: StyleRepresentation, style_m: StyleRepresentation,
                 weights=None) -> torch.Tensor:
    if len(style_f) != len(style_m):
        raise ValueError(f"layer count mismatch: {len(style_f)} vs {len(style_m)}")
    n_layers = len(style_m)
    if weights is None:
        weights = [1.0 / n_layers] * n_layers
    if len(weights) != n_layers:
        raise ValueError("one weight per style layer required")
    total = style_m.layers[0].new_zeros(())
    for w, lf, lm in zip(weights, style_f.layers, style_m.layers):
        if lf.shape != lm.shape:
            raise ValueError(f"style layer shape mismatch: {tuple(lf.shape)} vs {tuple(lm.shape)}")
        fm = _as_matrix(lm)
        c, n = fm.shape
        diff = gram(lf.detach()) - gram(lm)
        total = total + w * diff.square().sum() / (4.0 * c ** 2 * n ** 2)
    return total


def layer_statistics(style: StyleRepresentation, eps: float = 1e-5) -> list[torch.Tensor]:
    """Per layer, channel means and standard deviations as a ``(1, 2C)`` row."""
    out = []
    for layer in style.layers:
        flat = layer.flatten(2)
        mean = flat.mean(-1)
        std = (flat.var(-1, unbiased=False) + eps).sqrt()
        out.append(torch.cat([mean, std], dim=1))
    return out


def affine_signal(variant: str, style_m: StyleRepresentation) -> MatchingSignal:
    return MatchingSignal(variant, stats=layer_statistics(style_m))


# --- distribution matching -----------------------------------------------------

class GaussianHead(nn.Module):
    """Pooled style layers -> diagonal Gaussian over a ``latent_dim`` latent."""

    def __init__(self, widths: list[int], latent_dim: int = 16, hidden: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(nn.Linear(sum(widths), hidden), nn.ReLU(), nn.Linear(hidden, 2 * latent_dim))
        with torch.no_grad():
            self.net[-1].weight.zero_()
            self.net[-1].bias.zero_()

    def forward(self, style: StyleRepresentation) -> GaussianStats:
        pooled = torch.cat([t.flatten(2).mean(-1) for t in style.layers], dim=1)
        out = self.net(pooled)
        return GaussianStats(out[:, :self.latent_dim], out[:, self.latent_dim:])


def encode_gaussian(style: StyleRepresentation, head: GaussianHead) -> GaussianStats:
    return head(style)


def gaussian_kl(q: GaussianStats, p: GaussianStats) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over dimensions (and batch)."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    var_ratio = torch.exp(2 * (q.log_std - p.log_std))
    mahal = (q.mean - p.mean).square() / torch.exp(2 * p.log_std)
    return (p.log_std - q.log_std + 0.5 * (var_ratio + mahal) - 0.5).sum()


def reparameterize(stats: GaussianStats, generator: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """``mean + std * eps``; pass ``eps=0`` (a zero tensor) for the posterior mean."""
    if eps is None:
        eps = torch.randn(stats.mean.shape, generator=generator, dtype=stats.mean.dtype)
    return stats.mean + stats.std * eps


def distribution_match(style_f: StyleRepresentation | None, style_m: StyleRepresentation,
                       posterior: GaussianHead, prior: GaussianHead | None = None,
                       generator: torch.Generator | None = None, eps: torch.Tensor | None = None,
                       train: bool = True):
    """KL between the style_m-conditioned posterior and the style_f-conditioned prior.

    Returns ``(loss, signal)``; at inference (``train=False``) the loss is None
    and only ``style_m`` is needed.
    """
    q = posterior(style_m)
    signal = MatchingSignal("distribution", z=reparameterize(q, generator, eps))
    if not train:
        return None, signal
    if style_f is None:
        raise ValueError("distribution matching needs the full-modality style at train time")
    p = (prior or posterior)(style_f.detach())
    return gaussian_kl(q, p), signal


# --- adversarial matching --------------------------------------------------------

class Discriminator(nn.Module):
    """Three conv blocks (conv, ReLU, batch norm) over the deepest style layer."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(3):
            layers += [Conv3d(c, hidden, 3, padding=1), nn.ReLU(), nn.BatchNorm3d(hidden)]
            c = hidden
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(hidden, 1)

    def forward(self, style: StyleRepresentation) -> torch.Tensor:
        h = self.features(style.layers[-1]).flatten(2).mean(-1)
        return torch.sigmoid(self.classifier(h)).squeeze(-1)


def discriminator(style: StyleRepresentation, disc: Discriminator) -> torch.Tensor:
    return disc(style)


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP))


def discriminator_loss(style_f: StyleRepresentation, style_m: StyleRepresentation,
                       disc: Discriminator) -> torch.Tensor:
    """Full-path style is "real": ``-log D(fs_f) - log(1 - D(fs_m))``; no path gradients."""
    d_f = disc(style_f.detach())
    d_m = disc(style_m.detach())
    return -(_safe_log(d_f) + _safe_log(1.0 - d_m)).mean()


def generator_loss(style_m: StyleRepresentation, disc: Discriminator) -> torch.Tensor:
    """Non-saturating ``-log D(fs_m)``; callers keep ``disc`` out of this optimizer."""
    return -_safe_log(disc(style_m)).mean()


def adversarial_losses(style_f: StyleRepresentation | None, style_m: StyleRepresentation,
                       disc: Discriminator):
    if style_f is None:
        raise ValueError("adversarial matching needs the full-modality style at train time")
    d_loss = discriminator_loss(style_f, style_m, disc)
    g_loss = generator_loss(style_m, disc)
    return d_loss, g_loss, affine_signal("adversarial", style_m)


def texture_match(style_f: StyleRepresentation | None, style_m: StyleRepresentation,
                  weights=None, train: bool = True):
    signal = affine_signal("texture", style_m)
    if not train:
        return None, signal
    if style_f is None:
        raise ValueError("texture matching needs the full-modality style at train time")
    return texture_loss(style_f, style_m, weights), signal

