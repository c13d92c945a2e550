"""Missing-modality 3D tumour segmentation by co-training a full-modality
teacher path with a masked-input student path."""

from .decomposition import (STYLE_VARIANTS, ContentRepresentation, StyleModifier, StyleRepresentation,
                            extract_content, extract_style, modify_style, recombine)
from .engine import (SMUNet, TrainConfig, TrainState, infer, init_state, load_checkpoint,
                     save_checkpoint, train, train_step)
from .evaluation import (SubsetReport, SubsetRow, dice_score, emit_plot, emit_table, evaluate_subsets,
                         read_table)
from .objectives import (LossReport, LossWeights, content_loss, dice_loss, joint_loss, l1_global_loss,
                         mi_js_loss)
from .phantom import (LabeledVolume, ModalityMask, PhantomConfig, PhantomError, apply_modality_mask,
                      derive_regions, enumerate_subsets, generate_phantom, ingest_raw, write_raw)
from .style import gaussian_kl, gram, texture_loss
from .unet import UNet, UNetConfig

__version__ = "0.1.0"

__all__ = [
    "STYLE_VARIANTS", "ContentRepresentation", "StyleModifier", "StyleRepresentation", "extract_content",
    "extract_style", "modify_style", "recombine",
    "SMUNet", "TrainConfig", "TrainState", "infer", "init_state", "load_checkpoint", "save_checkpoint", "train",
    "train_step",
    "SubsetReport", "SubsetRow", "dice_score", "emit_plot", "emit_table", "evaluate_subsets", "read_table",
    "LossReport", "LossWeights", "content_loss", "dice_loss", "joint_loss", "l1_global_loss", "mi_js_loss",
    "LabeledVolume", "ModalityMask", "PhantomConfig", "PhantomError", "apply_modality_mask", "derive_regions",
    "enumerate_subsets", "generate_phantom", "ingest_raw", "write_raw",
    "gaussian_kl", "gram", "texture_loss",
    "UNet", "UNetConfig",
]
