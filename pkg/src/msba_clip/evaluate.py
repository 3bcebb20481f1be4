"""Evaluation protocols: scoring, robustness sweep, leave-one-method-out
ablations, localization quality and intensity-map export."""

from __future__ import annotations

import csv
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .dataset import (
    PERTURBATION_KINDS,
    ImageCache,
    ImageRecord,
    Manifest,
    PerturbationSpec,
    perturb,
    to_uint8,
)
from .metrics import SingleClassError, accuracy, auc, iou, video_scores
from .model import MSBACLIP, images_to_tensor, load_checkpoint
from .msba import map_to_png16, to_patch_targets, write_png_map, write_raw_map
from .train import TrainConfig, train

SCORE_COLUMNS = ("id", "group_id", "label", "y_hat", "z_cls", "s")

DEFAULT_VARIANTS = {
    "full": {},
    "no_msba": {"batch_composition": [1 / 3, 2 / 3, 0.0]},
    "no_mfie": {"loss_weights": {"lambda_int": 0.0, "lambda_wgt": 0.0}},
}


def _model(checkpoint) -> MSBACLIP:
    if isinstance(checkpoint, MSBACLIP):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


@torch.no_grad()
def score_images(model: MSBACLIP, images: np.ndarray, batch_size: int = 100) -> dict[str, np.ndarray]:
    """Fused probability, logit and similarity score for a (n, H, W, 3) stack."""
    was_training = model.training
    model.eval()
    out = {"y_hat": [], "z_cls": [], "s": []}
    dtype = next(model.parameters()).dtype
    for i in range(0, len(images), batch_size):
        res = model(images_to_tensor(images[i : i + batch_size], dtype), with_aux=False)
        out["y_hat"].append(res.fused_prob.double().numpy())
        out["z_cls"].append(res.z_cls.double().numpy())
        out["s"].append(res.s.double().numpy())
    model.train(was_training)
    return {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}


def _video_key(rec: ImageRecord):
    return (rec.group_id, rec.label, rec.method)


def record_images(records: Sequence[ImageRecord], cache: ImageCache,
                  perturbation: PerturbationSpec | None = None, seed: int = 0) -> np.ndarray:
    imgs = []
    for i, rec in enumerate(records):
        img = cache.image(rec)
        if perturbation is not None and perturbation.level > 0:
            img = perturb(img.astype(np.float64), perturbation, seed=[seed, i]).astype(np.float32)
        imgs.append(img)
    return np.stack(imgs)


def score_records(model, records, cache, batch_size=100, perturbation=None, seed=0) -> dict[str, np.ndarray]:
    return score_images(model, record_images(records, cache, perturbation, seed), batch_size)


@dataclass
class EvalReport:
    frame_acc: float
    frame_auc: float | None
    video_acc: float
    video_auc: float | None
    per_method: dict[int, dict[str, float]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frame_acc": self.frame_acc,
            "frame_auc": self.frame_auc,
            "video_acc": self.video_acc,
            "video_auc": self.video_auc,
            "per_method": {str(k): v for k, v in self.per_method.items()},
            "counts": self.counts,
        }


def write_scores(path: str | Path, records: Sequence[ImageRecord], scores: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for i, rec in enumerate(records):
            w.writerow([rec.id, rec.group_id, rec.label, repr(float(scores["y_hat"][i])),
                        repr(float(scores["z_cls"][i])), repr(float(scores["s"][i]))])


def read_scores(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["label"] = int(r["label"])
        for k in ("y_hat", "z_cls", "s"):
            r[k] = float(r[k])
    return rows


def report_from_scores(records: Sequence[ImageRecord], y_hat: np.ndarray, num_methods: int) -> EvalReport:
    labels = np.array([r.label for r in records])
    frame_acc = accuracy(y_hat, labels)
    try:
        frame_auc = auc(y_hat, labels)
    except SingleClassError:
        frame_auc = None
    v_scores, v_labels, _ = video_scores(y_hat, labels, [_video_key(r) for r in records])
    video_acc = accuracy(v_scores, v_labels)
    try:
        video_auc = auc(v_scores, v_labels)
    except SingleClassError:
        video_auc = None
    per_method = {}
    real = labels == 0
    for m in range(num_methods):
        sel = np.array([r.method == m for r in records])
        if sel.any() and real.any():
            keep = sel | real
            per_method[m] = {"auc": auc(y_hat[keep], labels[keep]), "acc": accuracy(y_hat[sel], labels[sel])}
    counts = {"frames": len(records), "real": int(real.sum()), "fake": int((~real).sum()), "videos": len(v_labels)}
    return EvalReport(frame_acc, frame_auc, video_acc, video_auc, per_method, counts)


def evaluate(checkpoint, manifest: Manifest, split: str = "test", out_dir: str | Path | None = None,
             cache: ImageCache | None = None, perturbation: PerturbationSpec | None = None,
             seed: int = 0, batch_size: int = 100, require_auc: bool = True) -> EvalReport:
    """Score one split. A single-class split raises after the report (ACC) is computed."""
    model = _model(checkpoint)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    cache = cache or ImageCache(manifest)
    scores = score_records(model, records, cache, batch_size, perturbation, seed)
    report = report_from_scores(records, scores["y_hat"], manifest.num_methods)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_scores(out / "scores.csv", records, scores)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    if require_auc and report.frame_auc is None:
        raise SingleClassError(f"split {split!r} holds a single class; AUC undefined (acc={report.frame_acc})")
    return report


# ---------------------------------------------------------------------------
# robustness


@dataclass
class RobustnessReport:
    clean_auc: float
    grid: dict[tuple[str, int], float]

    def rows(self) -> list[tuple]:
        rows = [("clean", 0, "", self.clean_auc)]
        for (kind, level), value in self.grid.items():
            rows.append((kind, level, PerturbationSpec(kind, level).parameter, value))
        return rows

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("kind", "level", "parameter", "frame_auc"))
            for kind, level, param, value in self.rows():
                w.writerow((kind, level, param, repr(value)))


def robustness_sweep(checkpoint, manifest: Manifest, split: str = "test", seed: int = 0,
                     out_dir: str | Path | None = None, cache: ImageCache | None = None,
                     batch_size: int = 100) -> RobustnessReport:
    model = _model(checkpoint)
    cache = cache or ImageCache(manifest)
    clean = evaluate(model, manifest, split, cache=cache, seed=seed, batch_size=batch_size).frame_auc
    grid = {}
    for kind in PERTURBATION_KINDS:
        for level in range(1, 6):
            rep = evaluate(model, manifest, split, cache=cache, perturbation=PerturbationSpec(kind, level),
                           seed=seed, batch_size=batch_size)
            grid[(kind, level)] = rep.frame_auc
    report = RobustnessReport(clean, grid)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        report.write_csv(Path(out_dir) / "robustness.csv")
    return report


# ---------------------------------------------------------------------------
# leave-one-method-out ablation


@dataclass
class AblationResult:
    runs: list[dict]  # one dict per (variant, held_out, seed)
    table: list[dict]  # one dict per (variant, held_out)

    def auc_of(self, variant: str, held_out: int, seed: int) -> float:
        for r in self.runs:
            if (r["variant"], r["held_out"], r["seed"]) == (variant, held_out, seed):
                return r["auc"]
        raise KeyError((variant, held_out, seed))


def held_out_manifest(manifest: Manifest, method: int) -> tuple[Manifest, Manifest]:
    """(training manifest without ``method``, test manifest with reals + ``method`` fakes)."""
    train_m = manifest.subset([r for r in manifest.records if r.split != "test" and r.method != method])
    test_m = manifest.subset([r for r in manifest.records if r.split == "test" and r.method in (None, method)])
    return train_m, test_m


def ablation_run(base_config: TrainConfig, manifest: Manifest, seeds: Sequence[int],
                 variants: dict[str, dict] | None = None, held_out: Sequence[int] | None = None,
                 out_dir: str | Path = "ablation", cache: ImageCache | None = None,
                 keep_checkpoints: bool = False) -> AblationResult:
    variants = DEFAULT_VARIANTS if variants is None else variants
    missing = {"full", "no_msba", "no_mfie"} - set(variants)
    if missing:
        raise ValueError(f"ablation variants must include {sorted(missing)}")
    if len(seeds) < 3:
        raise ValueError("ablation needs at least three seeds")
    held_out = list(range(manifest.num_methods)) if held_out is None else list(held_out)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or ImageCache(manifest)
    runs = []
    for name, delta in variants.items():
        for m in held_out:
            train_m, test_m = held_out_manifest(manifest, m)
            for seed in seeds:
                cfg = base_config.updated({**delta, "seed": int(seed)})
                run_dir = out / f"{name}_m{m}_s{seed}"
                result = train(cfg, train_m, run_dir, cache=cache)
                rep = evaluate(result.model, test_m, "test", cache=cache, batch_size=cfg.eval_batch_size)
                runs.append({"variant": name, "held_out": m, "seed": int(seed), "auc": rep.frame_auc,
                             "acc": rep.frame_acc, "config_hash": cfg.digest()})
                if not keep_checkpoints:
                    shutil.rmtree(run_dir, ignore_errors=True)
    table = []
    for name in variants:
        for m in held_out:
            vals = np.array([r["auc"] for r in runs if r["variant"] == name and r["held_out"] == m])
            hashes = sorted({r["config_hash"] for r in runs if r["variant"] == name and r["held_out"] == m})
            table.append({"variant": name, "held_out": m, "mean_auc": float(vals.mean()),
                          "std_auc": float(vals.std()), "n_seeds": len(vals), "config_hashes": " ".join(hashes)})
    with open(out / "ablation_runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(runs[0]))
        w.writeheader()
        w.writerows(runs)
    with open(out / "ablation_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]))
        w.writeheader()
        w.writerows(table)
    return AblationResult(runs, table)


# ---------------------------------------------------------------------------
# localization and map export


@torch.no_grad()
def predict_maps(model: MSBACLIP, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    maps = []
    for i in range(0, len(images), batch_size):
        out = model(images_to_tensor(images[i : i + batch_size], dtype))
        maps.append(out.intensity.combined.double().numpy())
    return np.concatenate(maps)


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """A cell is positive when at least half of its pixels are masked."""
    return to_patch_targets(mask.astype(np.float64), grid) >= 0.5


def localization_iou(checkpoint, manifest: Manifest, split: str = "test", methods: Sequence[int] | None = None,
                     cache: ImageCache | None = None) -> dict[str, float]:
    """Mean IoU of median-thresholded predicted maps against downsampled masks,
    next to the IoU expected from a random map with the same positive rate."""
    model = _model(checkpoint)
    cache = cache or ImageCache(manifest)
    recs = [r for r in manifest.split(split) if r.label == 1 and r.mask_path is not None
            and (methods is None or r.method in methods)]
    if not recs:
        raise ValueError("no masked fake records to localize")
    preds = predict_maps(model, np.stack([cache.image(r) for r in recs]))
    grid = preds.shape[1:]
    ious, baselines = [], []
    for rec, pred in zip(recs, preds):
        target = downsample_mask(cache.mask(rec), grid)
        predicted = pred > np.median(pred)
        ious.append(iou(predicted, target))
        # random map thresholded at its median: positive rate q, mask area a
        q, a = predicted.mean(), target.mean()
        inter = q * a
        baselines.append(inter / (q + a - inter) if q + a > 0 else 1.0)
    return {"mean_iou": float(np.mean(ious)), "baseline_iou": float(np.mean(baselines)), "n": len(recs)}


def export_intensity_maps(checkpoint, manifest: Manifest, ids: Sequence[str], out_dir: str | Path,
                          cache: ImageCache | None = None) -> list[Path]:
    """Write input, ground-truth target and predicted maps for each id, plus a triptych PNG."""
    model = _model(checkpoint)
    cache = cache or ImageCache(manifest)
    recs = [manifest.get(i) for i in ids]  # raises KeyError for unknown ids
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    preds = predict_maps(model, np.stack([cache.image(r) for r in recs]))
    written = []
    for rec, pred in zip(recs, preds):
        grid = pred.shape
        if rec.label == 0:
            gt = np.zeros(grid)
        else:
            groups = manifest.groups(rec.split)
            real = cache.image(groups[rec.group_id]["real"]).astype(np.float64)
            gt = to_patch_targets(np.abs(real - cache.image(rec)), grid)
        shutil.copyfile(manifest.resolve(rec.image_path), out / f"{rec.id}_input.png")
        write_png_map(out / f"{rec.id}_gt.png", gt)
        write_raw_map(out / f"{rec.id}_gt.fimp", gt)
        write_png_map(out / f"{rec.id}_pred.png", pred)
        write_raw_map(out / f"{rec.id}_pred.fimp", pred)
        h, w = cache.image(rec).shape[:2]
        panels = [to_uint8(cache.image(rec))]
        for mp in (gt, pred):
            big = Image.fromarray((map_to_png16(mp) >> 8).astype(np.uint8)).resize((w, h), Image.NEAREST)
            panels.append(np.repeat(np.asarray(big)[..., None], 3, axis=2))
        Image.fromarray(np.concatenate(panels, axis=1)).save(out / f"{rec.id}_triptych.png")
        written += [out / f"{rec.id}_{s}" for s in ("input.png", "gt.png", "gt.fimp", "pred.png", "pred.fimp",
                                                     "triptych.png")]
    return written
