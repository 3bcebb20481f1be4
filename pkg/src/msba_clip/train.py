"""Training loop, learning-rate schedule and run configuration."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import BatchComposition, ImageCache, Manifest, batch_iterator
from .metrics import accuracy, auc
from .model import MSBACLIP, UNKNOWN, ModelConfig, images_to_tensor, load_checkpoint, save_checkpoint
from .objectives import LossWeights, total_loss

log = logging.getLogger(__name__)

PROMPT_MODES = ("unknown_only", "type_conditioned_train")
LOG_COLUMNS = ("step", "l_cls", "l_sim", "l_int", "l_wgt", "total", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step


@dataclass
class MSBAParams:
    beta: float = 1.0
    lambda_range: tuple[float, float] = (0.8, 1.2)
    min_intensity: float = 1e-3
    signed: bool = False

    def __post_init__(self):
        self.lambda_range = tuple(self.lambda_range)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.lambda_range[0] > self.lambda_range[1]:
            raise ValueError("lambda_range must be (low, high)")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    msba: MSBAParams = field(default_factory=MSBAParams)
    batch_size: int = 32
    epochs: int = 10
    lr_init: float = 3e-4
    lr_final: float = 3e-6
    schedule: str = "cosine"
    weight_decay: float = 0.05
    seed: int = 0
    batch_composition: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    prompt_mode: str = "unknown_only"
    deterministic: bool = True
    eval_batch_size: int = 100

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.msba, dict):
            self.msba = MSBAParams(**self.msba)
        self.batch_composition = tuple(self.batch_composition)
        BatchComposition(*self.batch_composition)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def updated(self, delta: dict) -> "TrainConfig":
        return TrainConfig.from_dict(merge_dicts(self.to_dict(), delta))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def merge_dicts(base: dict, delta: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_dicts(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def full_scale_preset() -> TrainConfig:
    """Full-scale settings (ViT-B/16 sized widths, 100 epochs); far beyond desk scale."""
    return TrainConfig(
        model=ModelConfig(image_size=(224, 224), patch_size=16, d_v=768, d_t=512, depth=12, heads=12,
                          mip_hidden=512, text_heads=8),
        batch_size=64,
        epochs=100,
        lr_init=2e-5,
        lr_final=2e-7,
    )


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_final`` at step ``total_steps - 1``."""
    last = total_steps - 1
    if step <= 0 or last <= 0:
        return lr_init
    if step >= last:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * step / last))


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def patch_targets_batch(intensity: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Block-average a (B, H, W) stack of single-channel maps to (B, h, w)."""
    b, H, W = intensity.shape
    h, w = grid
    if H % h or W % w:
        raise ValueError(f"maps of size {(H, W)} do not divide into {grid}")
    return intensity.reshape(b, h, H // h, w, W // w).mean(axis=(2, 4))


def epoch_length(manifest: Manifest, batch_size: int, composition: BatchComposition, split: str = "train") -> int:
    n_real, n_fake, n_msba = composition.counts(batch_size)
    recs = manifest.split(split)
    groups = manifest.groups(split)
    sizes = (
        (n_real, sum(r.label == 0 for r in recs)),
        (n_fake, sum(r.label == 1 for r in recs)),
        (n_msba, sum(g["real"] is not None and len(g["fakes"]) >= 2 for g in groups.values())),
    )
    return max(math.ceil(n / k) for k, n in sizes if k)


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    val_log_path: Path
    best_epoch: int
    best_val_auc: float | None
    model: MSBACLIP


def build_model(config: TrainConfig, num_methods: int | None = None) -> MSBACLIP:
    cfg = config.model
    if num_methods is not None and num_methods != cfg.num_methods:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "num_methods": num_methods})
    return MSBACLIP(cfg)


def train(config: TrainConfig, manifest: Manifest, out_dir: str | Path, cache: ImageCache | None = None,
          progress: bool = False) -> TrainResult:
    """Train a detector and keep the checkpoint with the best validation AUC."""
    from .evaluate import score_records  # evaluate imports this module

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(config.to_dict(), indent=2), encoding="utf-8")
    if not manifest.split("train"):
        raise ValueError("training split is empty")
    if manifest.image_size is not None and tuple(manifest.image_size) != tuple(config.model.image_size):
        raise ValueError(f"manifest images are {manifest.image_size}, model expects {config.model.image_size}")

    set_determinism(config.seed, config.deterministic)
    cache = cache or ImageCache(manifest)
    model = build_model(config, manifest.num_methods)
    grid = model.config.grid
    target_grid = (4 * grid[0], 4 * grid[1])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr_init, weight_decay=config.weight_decay)
    composition = BatchComposition(*config.batch_composition)
    steps_per_epoch = epoch_length(manifest, config.batch_size, composition)
    total_steps = steps_per_epoch * config.epochs
    msba_params = asdict(config.msba)

    val_recs = manifest.split("val")
    has_val = len({r.label for r in val_recs}) == 2
    ckpt_path = out / "checkpoint.bin"
    log_path = out / "train_log.csv"
    val_log_path = out / "val_log.csv"
    best_auc, best_epoch = -math.inf, -1
    step = 0
    with open(log_path, "w", newline="", encoding="utf-8") as fh, \
            open(val_log_path, "w", newline="", encoding="utf-8") as vfh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        vwriter = csv.writer(vfh)
        vwriter.writerow(("epoch", "val_auc", "val_acc"))
        for epoch in range(config.epochs):
            model.train()
            for batch in batch_iterator(manifest, config.batch_size, composition, config.seed, "train",
                                        epoch, msba_params, cache):
                lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)
                for group in opt.param_groups:
                    group["lr"] = lr
                images = images_to_tensor(batch.images())
                prompt_idx = torch.full((len(batch.samples),), UNKNOWN, dtype=torch.long)
                if config.prompt_mode == "type_conditioned_train":
                    for i, s in enumerate(batch.samples):
                        if s.kind == "fake" and s.method is not None and s.method < UNKNOWN:
                            prompt_idx[i] = s.method
                output = model(images, prompt_idx)
                alpha, has_alpha = batch.alphas(manifest.num_methods)
                targets = patch_targets_batch(batch.intensities(), target_grid)
                losses = total_loss(output, torch.from_numpy(batch.labels()), torch.from_numpy(targets),
                                    torch.from_numpy(alpha), has_alpha, config.loss_weights)
                value = float(losses.total.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(step, value)
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                opt.step()
                f = losses.as_floats()
                writer.writerow([step, *(repr(f[k]) for k in LOG_COLUMNS[1:6]), repr(lr)])
                step += 1
            if has_val:
                scores = score_records(model, val_recs, cache, config.eval_batch_size)
                labels = [r.label for r in val_recs]
                val_auc = auc(scores["y_hat"], labels)
                val_acc = accuracy(scores["y_hat"], labels)
                vwriter.writerow([epoch, repr(val_auc), repr(val_acc)])
                if progress:
                    log.info("epoch %d: val auc %.4f acc %.4f", epoch, val_auc, val_acc)
            else:
                val_auc = float(epoch)  # no usable validation split: keep the latest epoch
            if val_auc > best_auc:
                best_auc, best_epoch = val_auc, epoch
                save_checkpoint(ckpt_path, model, {"epoch": epoch, "val_auc": val_auc if has_val else None,
                                                   "seed": config.seed, "config_digest": config.digest()})
    best_model, _ = load_checkpoint(ckpt_path)
    return TrainResult(ckpt_path, log_path, val_log_path, best_epoch, best_auc if has_val else None, best_model)
