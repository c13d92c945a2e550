"""Segmentation, consistency and content losses and the weighted joint objective."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .conv import Conv3d
from .decomposition import ContentRepresentation
from .unet import LABELS

DICE_EPS = 1e-5
CRITIC_CLAMP = 20.0


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 1.0
    lambda_consistency: float = 1.0
    lambda_style: float = 1.0
    lambda_content: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * getattr(self, f.name) for f in fields(self)))


@dataclass
class LossReport:
    seg_full: float
    seg_missing: float
    mi: float
    l1: float
    style: float
    content: float
    joint: float
    step: int

    def recompute_joint(self, weights: LossWeights) -> float:
        return float(joint_loss(asdict(self), weights))

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))


def label_indices(labels) -> torch.Tensor:
    """Map label values {0, 1, 2, 4} to class indices 0..3."""
    labels = torch.as_tensor(np.asarray(labels)) if not torch.is_tensor(labels) else labels
    labels = labels.long()
    bad = sorted(set(torch.unique(labels).tolist()) - set(LABELS))
    if bad:
        raise ValueError(f"invalid label value {bad[0]}; allowed {LABELS}")
    lut = torch.zeros(max(LABELS) + 1, dtype=torch.long)
    lut[list(LABELS)] = torch.arange(len(LABELS))
    return lut[labels]


def dice_loss(logits: torch.Tensor, labels, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice over the four classes, averaged over classes present in ``labels``."""
    if logits.dim() == 4:
        logits = logits.unsqueeze(0)
    target = label_indices(labels)
    if target.dim() == 3:
        target = target.unsqueeze(0)
    if logits.shape[2:] != target.shape[1:] or logits.shape[0] != target.shape[0]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs labels {tuple(target.shape)}")
    n_classes = logits.shape[1]
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(target, n_classes).movedim(-1, 1).to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    present = onehot.sum(dims) > 0
    return 1.0 - dice[present].mean()


def _content_tensor(x) -> torch.Tensor:
    return x.tensor if isinstance(x, ContentRepresentation) else x


def content_loss(fc_f, fc_m) -> torch.Tensor:
    fc_f, fc_m = _content_tensor(fc_f), _content_tensor(fc_m)
    if fc_f.shape != fc_m.shape:
        raise ValueError(f"content shape mismatch: {tuple(fc_f.shape)} vs {tuple(fc_m.shape)}")
    return 0.5 * (fc_f.detach() - fc_m).square().sum()


def l1_global_loss(sl_f: torch.Tensor, sl_m: torch.Tensor) -> torch.Tensor:
    """Sum over classes of |GAP(sl_f) - GAP(sl_m)|, GAP = spatial mean."""
    if sl_f.shape != sl_m.shape:
        raise ValueError(f"logit shape mismatch: {tuple(sl_f.shape)} vs {tuple(sl_m.shape)}")
    gap_f = sl_f.detach().flatten(2).mean(-1)
    gap_m = sl_m.flatten(2).mean(-1)
    return (gap_f - gap_m).abs().sum(dim=1).mean()


class Critic(nn.Module):
    """Pointwise scorer of (full, missing) class-score pairs."""

    def __init__(self, num_classes: int = 4, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(Conv3d(2 * num_classes, hidden, 1), nn.ReLU(), Conv3d(hidden, 1, 1))

    def forward(self, sl_f: torch.Tensor, sl_m: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([sl_f, sl_m], dim=1)).clamp(-CRITIC_CLAMP, CRITIC_CLAMP)


def derangement(n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """A random permutation with no fixed points (a single random cycle)."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 positions")
    order = torch.randperm(n, generator=generator)
    perm = torch.empty(n, dtype=torch.long)
    perm[order] = order.roll(-1)
    return perm


def mi_js_loss(sl_f: torch.Tensor, sl_m: torch.Tensor, critic: nn.Module,
               generator: torch.Generator | None = None, perm: torch.Tensor | None = None) -> torch.Tensor:
    """``E_joint[-sp(CT)] - E_marginal[sp(CT)]`` with intra-volume shuffled negatives."""
    if sl_f.shape != sl_m.shape:
        raise ValueError(f"logit shape mismatch: {tuple(sl_f.shape)} vs {tuple(sl_m.shape)}")
    n = sl_m[0, 0].numel()
    if perm is None:
        perm = derangement(n, generator)
    shuffled = sl_m.flatten(2)[:, :, perm].reshape(sl_m.shape)
    sl_f = sl_f.detach()
    joint = critic(sl_f, sl_m)
    marginal = critic(sl_f, shuffled)
    return -F.softplus(joint).mean() - F.softplus(marginal).mean()


def consistency_loss(mi, l1):
    return mi + l1


def joint_loss(components, weights: LossWeights):
    """Weighted sum of the four objective groups.

    ``components`` is either a mapping with the six per-term entries of a
    :class:`LossReport` (seg = full + missing, consistency = mi + l1) or a
    4-sequence ``(segmentation, consistency, style, content)``.
    """
    if isinstance(components, (list, tuple)):
        seg, cons, style, content = components
        named = {"segmentation": seg, "consistency": cons, "style": style, "content": content}
    else:
        c = components if isinstance(components, dict) else asdict(components)
        named = {k: c[k] for k in ("seg_full", "seg_missing", "mi", "l1", "style", "content")}
    for name, value in named.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {name!r}: {v}")
    if "segmentation" not in named:
        seg = named["seg_full"] + named["seg_missing"]
        cons = consistency_loss(named["mi"], named["l1"])
        style, content = named["style"], named["content"]
    return (weights.lambda_seg * seg + weights.lambda_consistency * cons
            + weights.lambda_style * style + weights.lambda_content * content)
