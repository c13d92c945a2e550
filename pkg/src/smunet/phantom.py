"""Synthetic multi-modal tumour phantoms, modality masking and raw-volume I/O.

Every volume is a 4-channel grid ``(4, H, W, D)`` in the fixed modality order
FLAIR, T1, T1c, T2, paired with a ``uint8`` label grid drawn from {0, 1, 2, 4}.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

MODALITIES = ("flair", "t1", "t1c", "t2")
LABEL_VALUES = (0, 1, 2, 4)
POOL_DIVISOR = 16

# Rows of the results table, top to bottom (FLAIR, T1, T1c, T2).
_SUBSET_ORDER = (
    "0001", "0010", "0100", "1000",
    "0011", "0110", "1100", "0101", "1001", "1010",
    "1110", "1101", "1011", "0111",
    "1111",
)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityMask:
    present: tuple[bool, bool, bool, bool]

    def __post_init__(self):
        present = tuple(bool(p) for p in self.present)
        if len(present) != len(MODALITIES):
            raise PhantomError(f"mask needs {len(MODALITIES)} entries, got {len(present)}")
        if not any(present):
            raise PhantomError("at least one modality must be present")
        object.__setattr__(self, "present", present)

    @classmethod
    def parse(cls, text: str) -> "ModalityMask":
        """Parse ``"1000"``-style bit strings (FLAIR, T1, T1c, T2)."""
        text = text.strip()
        if len(text) != 4 or set(text) - {"0", "1"}:
            raise PhantomError(f"invalid mask string {text!r}; expected 4 digits of 0/1")
        return cls(tuple(c == "1" for c in text))

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls((True, True, True, True))

    @property
    def bits(self) -> str:
        return "".join("1" if p else "0" for p in self.present)

    @property
    def names(self) -> list[str]:
        return [m for m, p in zip(MODALITIES, self.present) if p]

    def __str__(self):
        return self.bits


@dataclass
class LabeledVolume:
    modalities: np.ndarray
    labels: np.ndarray
    case_id: str = ""

    def __post_init__(self):
        self.modalities = np.asarray(self.modalities, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.validate()

    @property
    def spatial_size(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def validate(self):
        where = f" (case {self.case_id})" if self.case_id else ""
        if self.modalities.ndim != 4 or self.modalities.shape[0] != len(MODALITIES):
            raise PhantomError(f"modalities must have shape (4, H, W, D), got {self.modalities.shape}{where}")
        if self.modalities.shape[1:] != self.labels.shape:
            raise PhantomError(
                f"shape mismatch: modalities {self.modalities.shape[1:]} vs labels {self.labels.shape}{where}"
            )
        check_labels(self.labels, where)
        if not np.isfinite(self.modalities).all():
            raise PhantomError(f"non-finite intensities{where}")


@dataclass(frozen=True)
class PhantomConfig:
    spatial_size: tuple[int, int, int] = (32, 32, 32)
    num_volumes: int = 1
    seed: int = 0
    style_gap: float = 0.5
    tumor_probability: float = 1.0

    def __post_init__(self):
        size = tuple(int(s) for s in self.spatial_size)
        object.__setattr__(self, "spatial_size", size)
        if len(size) != 3 or any(s <= 0 for s in size):
            raise PhantomError(f"spatial_size must be three positive integers, got {size}")
        if any(s % POOL_DIVISOR for s in size):
            raise PhantomError(f"spatial_size {size} must be divisible by {POOL_DIVISOR}")
        if self.num_volumes < 1:
            raise PhantomError("num_volumes must be positive")
        if not self.style_gap >= 0:
            raise PhantomError("style_gap must be non-negative")
        if not 0.0 <= self.tumor_probability <= 1.0:
            raise PhantomError("tumor_probability must lie in [0, 1]")


@dataclass
class RegionMasks:
    wt: np.ndarray
    ct: np.ndarray
    et: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"wt": self.wt, "ct": self.ct, "et": self.et}


def check_labels(labels: np.ndarray, where: str = ""):
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise PhantomError(f"unknown label value {int(bad[0])}{where}; allowed {LABEL_VALUES}")


def derive_regions(labels: np.ndarray) -> RegionMasks:
    labels = np.asarray(labels)
    check_labels(labels)
    return RegionMasks(
        wt=np.isin(labels, (1, 2, 4)),
        ct=np.isin(labels, (1, 4)),
        et=labels == 4,
    )


def apply_modality_mask(volume: LabeledVolume, mask: ModalityMask) -> LabeledVolume:
    """Zero the channels of absent modalities; present channels are copied unchanged."""
    keep = np.asarray(mask.present, dtype=bool)
    modalities = volume.modalities.copy()
    modalities[~keep] = 0.0
    return LabeledVolume(modalities, volume.labels.copy(), volume.case_id)


def mask_array(modalities: np.ndarray, mask: ModalityMask) -> np.ndarray:
    out = np.array(modalities, copy=True)
    out[~np.asarray(mask.present, dtype=bool)] = 0.0
    return out


def enumerate_subsets() -> list[ModalityMask]:
    return [ModalityMask.parse(bits) for bits in _SUBSET_ORDER]


# --- phantom generation -------------------------------------------------------

# Anatomy levels shared by all modalities; every channel is a monotone map of this.
_LEVEL_BRAIN = 0.25
_LEVEL = {2: 0.5, 1: 0.75, 4: 1.0}
_BRAIN_FIELD_AMPLITUDE = 0.08

# Per-modality rendering: monotone transform of the anatomy level, then
# band-limited texture noise (correlation length, amplitude per unit style_gap).
_TRANSFORMS = {
    "flair": lambda a: a ** 0.35,
    "t1": lambda a: 1.0 - 0.8 * a,
    "t1c": lambda a: a ** 3.0,
    "t2": lambda a: a ** 0.7,
}
_TEXTURE = {
    "flair": (1.5, 0.24),
    "t1": (0.8, 0.12),
    "t1c": (1.0, 0.16),
    "t2": (2.0, 0.16),
}


def modality_transform(name: str, level: np.ndarray) -> np.ndarray:
    return _TRANSFORMS[name](np.asarray(level, dtype=np.float64))


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def _ellipsoid(coords: np.ndarray, center, radii, rot: np.ndarray, wobble=None) -> np.ndarray:
    local = np.einsum("ij,j...->i...", rot.T, coords - np.reshape(center, (3, 1, 1, 1)))
    q = sum((local[i] / radii[i]) ** 2 for i in range(3))
    limit = 1.0 if wobble is None else 1.0 + wobble
    return q <= limit


def _nearest_voxel(center, shape) -> tuple[int, int, int]:
    return tuple(int(np.clip(round(c), 0, s - 1)) for c, s in zip(center, shape))


def _make_geometry(rng: np.random.Generator, shape, with_tumor: bool):
    size = np.asarray(shape, dtype=np.float64)
    coords = np.stack(np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij"))
    center = (size - 1) / 2 + rng.uniform(-1.5, 1.5, 3)
    brain_radii = size * rng.uniform(0.36, 0.44, 3)
    brain = _ellipsoid(coords, center, brain_radii, Rotation.random(random_state=rng).as_matrix())

    labels = np.zeros(shape, dtype=np.uint8)
    if not with_tumor:
        return brain, labels

    t_center = center + size * rng.uniform(-0.15, 0.15, 3)
    rot = Rotation.random(random_state=rng).as_matrix()
    edema_r = size * rng.uniform(0.14, 0.22, 3)
    core_r = edema_r * rng.uniform(0.55, 0.7)
    enh_r = core_r * rng.uniform(0.45, 0.6)
    wobble = 0.15 * _smooth_noise(rng, shape, 3.0)

    edema = _ellipsoid(coords, t_center, edema_r, rot, wobble) & brain
    core = _ellipsoid(coords, t_center, core_r, rot, wobble) & edema
    enh = _ellipsoid(coords, t_center, enh_r, rot, wobble) & core
    seed_voxel = _nearest_voxel(t_center, shape)
    # keep every region non-empty even for the smallest draws
    for region in (edema, core, enh):
        region[seed_voxel] = True
    labels[edema] = 2
    labels[core] = 1
    labels[enh] = 4
    return brain, labels


def render_modalities(labels: np.ndarray, brain: np.ndarray, rng: np.random.Generator,
                      style_gap: float, brain_field: np.ndarray | None = None) -> np.ndarray:
    """Render the four channels from a label grid; z-scored over the brain."""
    level = np.where(brain, _LEVEL_BRAIN, 0.0)
    if brain_field is not None:
        level = level + np.where(brain, _BRAIN_FIELD_AMPLITUDE * brain_field, 0.0)
    for value, lv in _LEVEL.items():
        level[labels == value] = lv
    channels = []
    for name in MODALITIES:
        img = modality_transform(name, np.clip(level, 0.0, 1.0))
        sigma, amp = _TEXTURE[name]
        if style_gap > 0:
            img = img + style_gap * amp * _smooth_noise(rng, labels.shape, sigma)
        channels.append(np.where(brain, img, 0.0))
    return zscore_nonzero(np.stack(channels), support=brain)


def zscore_nonzero(modalities: np.ndarray, support: np.ndarray | None = None) -> np.ndarray:
    """Per-channel z-score over ``support`` (default: the channel's non-zero voxels)."""
    out = np.zeros(modalities.shape, dtype=np.float32)
    for c, img in enumerate(modalities):
        sel = (img != 0) if support is None else support
        if not sel.any():
            continue
        vals = img[sel].astype(np.float64)
        std = vals.std()
        out[c][sel] = ((vals - vals.mean()) / (std if std > 0 else 1.0)).astype(np.float32)
    return out


def generate_phantom(config: PhantomConfig) -> list[LabeledVolume]:
    volumes = []
    for i in range(config.num_volumes):
        rng = np.random.default_rng([config.seed, i])
        with_tumor = rng.uniform() < config.tumor_probability
        brain, labels = _make_geometry(rng, config.spatial_size, with_tumor)
        brain_field = _smooth_noise(rng, config.spatial_size, 2.5)
        mods = render_modalities(labels, brain, rng, config.style_gap, brain_field)
        volumes.append(LabeledVolume(mods, labels, case_id=f"case_{i:04d}"))
    return volumes


# --- raw case format ------------------------------------------------------------
#
# <case>/modalities.f32  little-endian float32, laid out (channel, D, H, W)
# <case>/labels.u8       uint8, laid out (D, H, W)
# <case>/meta.json       {"shape": [H, W, D]}

def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_raw_case(volume: LabeledVolume, case_dir: str | os.PathLike):
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    mods = np.ascontiguousarray(volume.modalities.transpose(0, 3, 1, 2), dtype="<f4")
    labels = np.ascontiguousarray(volume.labels.transpose(2, 0, 1), dtype=np.uint8)
    _atomic_write_bytes(case_dir / "modalities.f32", mods.tobytes())
    _atomic_write_bytes(case_dir / "labels.u8", labels.tobytes())
    _atomic_write_bytes(case_dir / "meta.json", json.dumps({"shape": list(volume.spatial_size)}).encode())


def write_raw(volumes: Iterable[LabeledVolume], root: str | os.PathLike) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, vol in enumerate(volumes):
        path = root / (vol.case_id or f"case_{i:04d}")
        write_raw_case(vol, path)
        paths.append(path)
    return paths


def read_raw_case(case_dir: str | os.PathLike, spatial_size: Sequence[int] | None = None) -> LabeledVolume:
    case_dir = Path(case_dir)
    case = case_dir.name
    try:
        meta = json.loads((case_dir / "meta.json").read_text())
        shape = tuple(int(s) for s in meta["shape"])
        raw_mods = np.fromfile(case_dir / "modalities.f32", dtype="<f4")
        raw_labels = np.fromfile(case_dir / "labels.u8", dtype=np.uint8)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise PhantomError(f"case {case}: unreadable ({exc})") from exc
    if len(shape) != 3:
        raise PhantomError(f"case {case}: meta shape must have 3 entries, got {shape}")
    if spatial_size is not None and tuple(spatial_size) != shape:
        raise PhantomError(f"case {case}: shape mismatch, expected {tuple(spatial_size)} got {shape}")
    h, w, d = shape
    if raw_mods.size != 4 * h * w * d:
        raise PhantomError(f"case {case}: shape mismatch, modalities.f32 holds {raw_mods.size} values, "
                           f"expected {4 * h * w * d}")
    if raw_labels.size != h * w * d:
        raise PhantomError(f"case {case}: shape mismatch, labels.u8 holds {raw_labels.size} values, "
                           f"expected {h * w * d}")
    mods = raw_mods.reshape(4, d, h, w).transpose(0, 2, 3, 1).astype(np.float32)
    labels = raw_labels.reshape(d, h, w).transpose(1, 2, 0)
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise PhantomError(f"case {case}: unknown label value {int(bad[0])}")
    if not np.isfinite(mods).all():
        raise PhantomError(f"case {case}: non-finite intensities")
    return LabeledVolume(zscore_nonzero(mods), labels, case_id=case)


def ingest_raw(path: str | os.PathLike, spatial_size: Sequence[int] | None = None) -> list[LabeledVolume]:
    """Load every case directory under ``path`` (sorted by name)."""
    root = Path(path)
    if not root.is_dir():
        raise PhantomError(f"{root} is not a directory")
    cases = sorted(p for p in root.iterdir() if p.is_dir())
    return [read_raw_case(p, spatial_size) for p in cases]
