"""Face-forgery detection with soft-blended augmentation and a text-guided ViT."""

from .dataset import (
    ImageRecord,
    Manifest,
    PerturbationSpec,
    SyntheticConfig,
    apply_forgery_method,
    batch_iterator,
    generate_synthetic_corpus,
    load_manifest,
    perturb,
)
from .estimator import MSBACLIPDetector
from .evaluate import ablation_run, evaluate, export_intensity_maps, robustness_sweep
from .metrics import accuracy, auc
from .model import MSBACLIP, ModelConfig, PromptTable, load_checkpoint, save_checkpoint
from .msba import BlendSpec, IntensityMap, blend_maps, intensity_map, sample_blend_weights, synthesize
from .objectives import LossWeights, total_loss
from .train import TrainConfig, train

__version__ = "0.1.0"
