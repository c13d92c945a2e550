"""Two-path co-training loop, checkpointing and missing-path inference."""

from __future__ import annotations

import io
import json
import logging
import os
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .decomposition import (STYLE_VARIANTS, StyleModifier, extract_content, extract_style,
                            recombine)
from .objectives import (Critic, LossReport, LossWeights, content_loss, dice_loss, joint_loss,
                         l1_global_loss, mi_js_loss)
from .phantom import LabeledVolume, ModalityMask, enumerate_subsets, mask_array
from .style import (Discriminator, GaussianHead, affine_signal, discriminator_loss,
                    distribution_match, generator_loss, texture_loss)
from .unet import UNet, UNetConfig, logits_to_labels

log = logging.getLogger(__name__)

MASK_POLICIES = ("fixed", "random")
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1
    epochs: int = 20
    seed: int = 0
    mask_policy: str = "fixed"
    mask: str = "1000"
    style_module: str = "adversarial"
    weights: LossWeights = field(default_factory=LossWeights)
    d_z: int = 16
    add_texture_loss: bool = True
    use_modification: bool = True
    spatial_size: tuple[int, int, int] = (32, 32, 32)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.style_module not in STYLE_VARIANTS:
            raise ValueError(f"unknown style_module {self.style_module!r}; valid: {', '.join(STYLE_VARIANTS)}")
        if self.mask_policy not in MASK_POLICIES:
            raise ValueError(f"unknown mask_policy {self.mask_policy!r}; valid: {', '.join(MASK_POLICIES)}")
        ModalityMask.parse(self.mask)
        if self.d_z < 1:
            raise ValueError("d_z must be positive")
        object.__setattr__(self, "spatial_size", tuple(int(s) for s in self.spatial_size))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.unet, dict):
            object.__setattr__(self, "unet", UNetConfig(**self.unet))

    @property
    def fixed_mask(self) -> ModalityMask:
        return ModalityMask.parse(self.mask)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial_size"] = list(self.spatial_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class SMUNet(nn.Module):
    """Both paths plus every auxiliary head."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        ucfg = config.unet
        widths = ucfg.widths
        self.variant = config.style_module
        self.full = UNet(ucfg)
        self.missing = UNet(ucfg)
        self.modifier = StyleModifier(widths, config.style_module, config.d_z)
        self.critic = Critic(ucfg.num_classes)
        if config.style_module == "distribution":
            self.posterior = GaussianHead(widths, config.d_z)
            self.prior = GaussianHead(widths, config.d_z)
        if config.style_module == "adversarial":
            self.disc = Discriminator(widths[-1])

    def main_parameters(self) -> list[nn.Parameter]:
        disc = {id(p) for p in self.disc.parameters()} if hasattr(self, "disc") else set()
        return [p for p in self.parameters() if id(p) not in disc]

    def full_path_parameters(self) -> dict[str, nn.Parameter]:
        return {f"full.{n}": p for n, p in self.full.named_parameters()}


@dataclass
class TrainState:
    config: TrainConfig
    model: SMUNet
    optimizer: torch.optim.Optimizer
    disc_optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    epoch: int = 0


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def init_state(config: TrainConfig) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SMUNet(config)
    opt = _adam(model.main_parameters(), config.learning_rate)
    dopt = _adam(model.disc.parameters(), config.learning_rate) if hasattr(model, "disc") else None
    return TrainState(config, model, opt, dopt)


def step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(step)) % (2 ** 63))


def draw_mask(config: TrainConfig, gen: torch.Generator) -> ModalityMask:
    if config.mask_policy == "fixed":
        return config.fixed_mask
    subsets = enumerate_subsets()
    return subsets[int(torch.randint(len(subsets), (1,), generator=gen))]


def _to_input(modalities: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(modalities, dtype=np.float32)).unsqueeze(0)


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def forward_missing(model: SMUNet, x_m: torch.Tensor, config: TrainConfig, style_f=None,
                    generator=None, eps=None, train=True):
    """Missing path: encode, match style, modify, recombine, decode."""
    feats = model.missing.encode(x_m)
    style_m = extract_style(feats)
    content_m = extract_content(feats)
    variant_loss = None
    if config.style_module == "distribution":
        variant_loss, signal = distribution_match(style_f, style_m, model.posterior, model.prior,
                                                  generator=generator, eps=eps, train=train)
    else:
        signal = affine_signal(config.style_module, style_m)
    mstyle = model.modifier(style_m, signal) if config.use_modification else style_m
    logits = model.missing.decode(recombine(feats, mstyle, content_m, model.missing))
    return logits, mstyle, content_m, variant_loss


def train_step(state: TrainState, volume: LabeledVolume) -> tuple[TrainState, LossReport]:
    cfg, model = state.config, state.model
    w = cfg.weights
    model.train()
    gen = step_generator(cfg.seed, state.step)
    mask = draw_mask(cfg, gen)
    x_f = _to_input(volume.modalities)
    x_m = _to_input(mask_array(volume.modalities, mask))
    labels = volume.labels

    feats_f = model.full.encode(x_f)
    style_f = extract_style(feats_f)
    content_f = extract_content(feats_f)
    sl_f = model.full.decode(recombine(feats_f, style_f, content_f, model.full))

    sl_m, mstyle, content_m, variant_loss = forward_missing(model, x_m, cfg, style_f, generator=gen)

    if cfg.style_module == "adversarial":
        d_loss = discriminator_loss(style_f, mstyle, model.disc)
        if not torch.isfinite(d_loss):
            raise FloatingPointError(f"non-finite loss term 'd_loss': {float(d_loss)}")
        state.disc_optimizer.zero_grad(set_to_none=True)
        d_loss.backward()
        state.disc_optimizer.step()
        variant_loss = generator_loss(mstyle, model.disc)
    elif cfg.style_module == "texture":
        variant_loss = texture_loss(style_f, mstyle)
    style = variant_loss
    if cfg.add_texture_loss and cfg.style_module != "texture":
        style = style + texture_loss(style_f, mstyle)

    terms = {
        "seg_full": dice_loss(sl_f, labels),
        "seg_missing": dice_loss(sl_m, labels),
        "mi": mi_js_loss(sl_f, sl_m, model.critic, generator=gen),
        "l1": l1_global_loss(sl_f, sl_m),
        "style": style,
        "content": content_loss(content_f, content_m),
    }
    joint = joint_loss(terms, w)
    state.optimizer.zero_grad(set_to_none=True)
    joint.backward()
    state.optimizer.step()

    report = LossReport(**{k: _scalar(v) for k, v in terms.items()}, joint=_scalar(joint), step=state.step)
    state.step += 1
    return state, report


def epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    return np.random.default_rng([seed, epoch, 7]).permutation(n).tolist()


def train(config: TrainConfig, data: Sequence[LabeledVolume], run_dir: str | os.PathLike | None = None,
          state: TrainState | None = None, checkpoint_every: int = 1) -> TrainState:
    """Run ``config.epochs`` epochs; with ``run_dir`` write losses.jsonl and checkpoints."""
    if not data:
        raise ValueError("training data is empty")
    state = state or init_state(config)
    losses = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(run_dir / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True))
        losses = open(run_dir / "losses.jsonl", "a" if state.step else "w")
    try:
        while state.epoch < config.epochs:
            for idx in epoch_order(config.seed, state.epoch, len(data)):
                state, report = train_step(state, data[idx])
                if losses is not None:
                    losses.write(report.to_json() + "\n")
            state.epoch += 1
            if losses is not None:
                losses.flush()
            log.info("epoch %d/%d done (step %d, last joint %.4f)",
                     state.epoch, config.epochs, state.step, report.joint)
            if run_dir is not None and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(state, run_dir / f"ckpt_epoch_{state.epoch}")
    finally:
        if losses is not None:
            losses.close()
    if run_dir is not None:
        save_checkpoint(state, run_dir / "final.ckpt")
    return state


@torch.no_grad()
def predict_logits(model: SMUNet, config: TrainConfig, modalities: np.ndarray, mask: ModalityMask) -> torch.Tensor:
    model.eval()
    x_m = _to_input(mask_array(modalities, mask))
    eps = torch.zeros(1, config.d_z) if config.style_module == "distribution" else None
    logits, *_ = forward_missing(model, x_m, config, eps=eps, train=False)
    return logits


def infer(state: TrainState, volume: LabeledVolume | np.ndarray, mask: ModalityMask) -> np.ndarray:
    """Label grid in {0, 1, 2, 4} from the missing path only (deterministic)."""
    if state is None or state.model is None:
        raise ValueError("infer needs a trained state")
    mods = volume.modalities if isinstance(volume, LabeledVolume) else np.asarray(volume)
    logits = predict_logits(state.model, state.config, mods, mask)
    return logits_to_labels(logits)[0].numpy()


# --- checkpoints ------------------------------------------------------------------

def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str):
    _atomic_write_bytes(Path(path), text.encode())


def save_checkpoint(state: TrainState, path: str | os.PathLike):
    """One zip archive: ``manifest.json`` plus ``tensors.pt`` (parameters and optimizer moments)."""
    path = Path(path)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "parameters": sorted(state.model.state_dict()),
    }
    tensors = {
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "disc_optimizer": state.disc_optimizer.state_dict() if state.disc_optimizer else None,
    }
    blob = io.BytesIO()
    torch.save(tensors, blob)
    archive = io.BytesIO()
    with zipfile.ZipFile(archive, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        zf.writestr("tensors.pt", blob.getvalue())
    _atomic_write_bytes(path, archive.getvalue())


def read_manifest(path: str | os.PathLike) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = torch.load(io.BytesIO(zf.read("tensors.pt")), weights_only=True)
    config = TrainConfig.from_dict(manifest["config"])
    state = init_state(config)
    state.model.load_state_dict(tensors["model"])
    state.optimizer.load_state_dict(tensors["optimizer"])
    if state.disc_optimizer is not None and tensors["disc_optimizer"] is not None:
        state.disc_optimizer.load_state_dict(tensors["disc_optimizer"])
    state.step = manifest["step"]
    state.epoch = manifest["epoch"]
    return state


def with_config(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
