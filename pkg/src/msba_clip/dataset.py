"""Image manifests, the seeded synthetic forgery corpus, perturbations and batching."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from ._validation import check_image

SPLITS = ("train", "val", "test")
RECORD_KEYS = ("id", "image_path", "label", "method", "group_id", "split", "mask_path")
METHOD_NAMES = ("region_warp", "local_blur", "color_shift", "noise_texture")

# level -> parameter, levels 1..5 (index 0 unused, level 0 is the identity)
PERTURBATION_LEVELS = {
    "gaussian_blur": (0.5, 1.0, 1.5, 2.0, 2.5),
    "gaussian_noise": (0.01, 0.02, 0.03, 0.04, 0.05),
    "jpeg_compression": (90, 70, 50, 30, 10),
    "color_saturation": (1.1, 1.2, 1.3, 1.4, 1.5),
    "color_contrast": (1.1, 1.2, 1.3, 1.4, 1.5),
}
PERTURBATION_KINDS = tuple(PERTURBATION_LEVELS)


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    image_path: str
    label: int
    method: int | None
    group_id: str
    split: str
    mask_path: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"record {self.id!r}: label must be 0 or 1")
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id!r}: unknown split {self.split!r}")
        if self.label == 0 and (self.method is not None or self.mask_path is not None):
            raise ManifestError(f"record {self.id!r}: real records carry no method or mask")
        if self.label == 1 and self.method is None:
            raise ManifestError(f"record {self.id!r}: fake records need a method index")
        if self.method is not None and (not isinstance(self.method, int) or self.method < 0):
            raise ManifestError(f"record {self.id!r}: method must be a nonnegative integer")

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in RECORD_KEYS}, ensure_ascii=False)


@dataclass
class Manifest:
    records: list[ImageRecord]
    num_methods: int
    image_size: tuple[int, int] | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.num_methods < 1:
            raise ManifestError("num_methods must be >= 1")
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)
            if rec.method is not None and rec.method >= self.num_methods:
                raise ManifestError(f"record {rec.id!r}: method {rec.method} >= num_methods")
        reals: dict[tuple[str, str], int] = {}
        for rec in self.records:
            if rec.label == 0:
                key = (rec.split, rec.group_id)
                reals[key] = reals.get(key, 0) + 1
        for rec in self.records:
            if rec.label == 1:
                n = reals.get((rec.split, rec.group_id), 0)
                if n != 1:
                    raise ManifestError(
                        f"record {rec.id!r}: group {rec.group_id!r} resolves to {n} real "
                        f"records in split {rec.split!r} (dangling group)"
                    )

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == name]

    def subset(self, records: Sequence[ImageRecord]) -> "Manifest":
        return Manifest(list(records), self.num_methods, self.image_size, self.root)

    def without_method(self, method: int) -> "Manifest":
        return self.subset([r for r in self.records if r.method != method])

    def only_method(self, method: int) -> "Manifest":
        return self.subset([r for r in self.records if r.method in (None, method)])

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def get(self, record_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.id == record_id:
                return rec
        raise KeyError(record_id)

    def groups(self, split: str) -> dict[str, dict]:
        """Map group_id -> {"real": record, "fakes": {method: record}} for one split."""
        out: dict[str, dict] = {}
        for rec in self.split(split):
            g = out.setdefault(rec.group_id, {"real": None, "fakes": {}})
            if rec.label == 0:
                g["real"] = rec
            else:
                g["fakes"][rec.method] = rec
        return out

    def dumps(self) -> str:
        return "".join(rec.to_json() + "\n" for rec in self.records)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def load_manifest(path: str | Path, num_methods: int | None = None) -> Manifest:
    """Parse a JSON-lines manifest; image paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != set(RECORD_KEYS):
                raise ManifestError(f"{path}:{lineno}: expected keys {list(RECORD_KEYS)}")
            try:
                records.append(ImageRecord(**obj))
            except (ManifestError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    methods = [r.method for r in records if r.method is not None]
    inferred = max(methods) + 1 if methods else 1
    manifest = Manifest(records, num_methods or inferred, None, path.parent)
    if records:
        first = manifest.resolve(records[0].image_path)
        if first.is_file():
            with Image.open(first) as im:
                manifest.image_size = (im.height, im.width)
    return manifest


# ---------------------------------------------------------------------------
# image IO


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


class ImageCache:
    """Loads manifest images once and keeps them as float32 arrays."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._images: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}

    def image(self, rec: ImageRecord) -> np.ndarray:
        if rec.id not in self._images:
            self._images[rec.id] = read_image(self.manifest.resolve(rec.image_path)).astype(np.float32)
        return self._images[rec.id]

    def mask(self, rec: ImageRecord) -> np.ndarray | None:
        if rec.mask_path is None:
            return None
        if rec.id not in self._masks:
            self._masks[rec.id] = read_mask(self.manifest.resolve(rec.mask_path))
        return self._masks[rec.id]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticConfig:
    num_groups: int
    image_size: tuple[int, int] = (64, 64)
    num_methods: int = 4
    seed: int = 0
    patch_size: int = 8
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if not 1 <= self.num_methods <= len(METHOD_NAMES):
            raise ValueError(f"num_methods must lie in [1, {len(METHOD_NAMES)}]")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], cells: int, channels: int) -> np.ndarray:
    coarse = rng.random((cells, cells, channels))
    zoom = (shape[0] / cells, shape[1] / cells, 1)
    return np.clip(ndimage.zoom(coarse, zoom, order=3, mode="nearest"), 0.0, 1.0)[: shape[0], : shape[1]]


def _ellipse(shape, cy, cx, ry, rx, theta=0.0) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _face_geometry(shape) -> tuple[float, float, float, float]:
    h, w = shape
    return h / 2, w / 2, 0.44 * h, 0.38 * w


def make_real_image(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A smooth random background and elliptical face overlaid with a fixed sensor pattern."""
    h, w = shape
    background = 0.25 + 0.5 * _smooth_field(rng, shape, 4, 3)
    cy, cx, ry, rx = _face_geometry(shape)
    face = _ellipse(shape, cy, cx, ry, rx)
    skin = np.array([0.78, 0.6, 0.48]) + rng.uniform(-0.12, 0.12, size=3)
    shading = 0.15 * (_smooth_field(rng, shape, 3, 1) - 0.5)
    face_img = skin[None, None, :] + shading
    img = np.where(face[..., None], face_img, background)
    # eyes and mouth give the face some structure for the warp to move
    for dy, dx, ry_, rx_ in ((-0.12, -0.14, 0.05, 0.08), (-0.12, 0.14, 0.05, 0.08), (0.2, 0.0, 0.05, 0.16)):
        feat = _ellipse(shape, cy + dy * h, cx + dx * w, ry_ * h, rx_ * w)
        img = np.where(feat[..., None], img * 0.45, img)
    # every real image carries the same pixel-aligned sensor pattern; forgeries disturb it locally
    return np.clip(img + sensor_pattern(shape)[..., None], 0.0, 1.0)


def sensor_pattern(shape: tuple[int, int], period: float = 4.0, amplitude: float = 0.06) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    return amplitude * np.sin(2 * math.pi * (xx + yy) / period) * np.sin(2 * math.pi * (xx - yy) / (2 * period))


def random_face_mask(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Seeded ellipse inside the face region covering roughly 15-40% of the image."""
    h, w = shape
    cy, cx, ry, rx = _face_geometry(shape)
    face = _ellipse(shape, cy, cx, ry, rx)
    for _ in range(100):
        frac = rng.uniform(0.15, 0.4)
        aspect = rng.uniform(0.7, 1.4)
        area = frac * h * w
        my = math.sqrt(area * aspect / math.pi)
        mx = area / (math.pi * my)
        oy = rng.uniform(-0.25, 0.25) * ry
        ox = rng.uniform(-0.25, 0.25) * rx
        mask = _ellipse(shape, cy + oy, cx + ox, my, mx, rng.uniform(0, math.pi)) & face
        cov = mask.mean()
        if 0.01 <= cov <= 0.5:
            return mask
    raise RuntimeError("could not draw a valid face mask")


def apply_forgery_method(
    image,
    method: int,
    seed: int | np.random.Generator,
    mask: np.ndarray | None = None,
    shift: float | Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one of the four synthetic localized forgeries.

    0 = region warp, 1 = local Gaussian blur, 2 = additive colour shift,
    3 = high-frequency noise texture. Pixels outside ``mask`` are copied
    from the input unchanged. ``shift`` overrides the colour shift of
    method 2.
    """
    img = check_image(image)
    if method not in range(len(METHOD_NAMES)):
        raise ValueError(f"method must lie in [0, {len(METHOD_NAMES) - 1}], got {method}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = img.shape[:2]
    if mask is None:
        mask = random_face_mask(shape, rng)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape or not mask.any():
        raise ValueError("mask must be a nonempty H x W boolean array")

    if method == 0:
        amp = rng.uniform(2.5, 4.0) * shape[0] / 64
        dy = (_smooth_field(rng, shape, 5, 1)[..., 0] - 0.5) * 2 * amp
        dx = (_smooth_field(rng, shape, 5, 1)[..., 0] - 0.5) * 2 * amp
        yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
        altered = np.stack(
            [ndimage.map_coordinates(img[..., c], [yy + dy, xx + dx], order=1, mode="reflect") for c in range(3)],
            axis=-1,
        )
    elif method == 1:
        sigma = rng.uniform(1.5, 2.5) * shape[0] / 64
        altered = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    elif method == 2:
        if shift is None:
            shift = rng.uniform(0.1, 0.2, size=3) * rng.choice([-1.0, 1.0], size=3)
        altered = img + np.broadcast_to(np.asarray(shift, dtype=np.float64), (3,))
    else:
        amp = rng.uniform(0.05, 0.09)
        noise = rng.standard_normal(shape)
        noise = noise - ndimage.uniform_filter(noise, 3)  # keep only high frequencies
        altered = img + amp * noise[..., None] / (noise.std() + 1e-12)
    forged = np.where(mask[..., None], np.clip(altered, 0.0, 1.0), img)
    return forged, mask


def generate_synthetic_corpus(config: SyntheticConfig, out_dir: str | Path) -> Manifest:
    """Write a seeded synthetic corpus (images, masks, manifest.jsonl) and return its manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output directory not writable: {out} ({exc})") from None
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory not writable: {out}")

    root = np.random.SeedSequence(config.seed)
    group_seeds = root.spawn(config.num_groups + 1)
    split_rng = np.random.default_rng(group_seeds[-1])
    order = split_rng.permutation(config.num_groups)
    n_train = math.ceil(config.split_fractions[0] * config.num_groups)
    n_val = math.ceil(config.split_fractions[1] * config.num_groups) if config.num_groups > 2 else 0
    n_val = min(n_val, config.num_groups - n_train)
    split_of = {}
    for rank, g in enumerate(order):
        split_of[int(g)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    width = max(4, len(str(config.num_groups - 1)))
    records = []
    for g in range(config.num_groups):
        rng = np.random.default_rng(group_seeds[g])
        gid = f"g{g:0{width}d}"
        split = split_of[g]
        real = to_uint8(make_real_image(config.image_size, rng)) / 255.0
        rel = f"images/{gid}_real.png"
        write_image(out / rel, real)
        records.append(ImageRecord(f"{gid}_real", rel, 0, None, gid, split, None))
        for m in range(config.num_methods):
            forged, mask = apply_forgery_method(real, m, rng)
            rel = f"images/{gid}_m{m}.png"
            mrel = f"masks/{gid}_m{m}.png"
            write_image(out / rel, forged)
            write_mask(out / mrel, mask)
            records.append(ImageRecord(f"{gid}_m{m}", rel, 1, m, gid, split, mrel))
    manifest = Manifest(records, config.num_methods, tuple(config.image_size), out)
    manifest.save(out / "manifest.jsonl")
    return manifest


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in PERTURBATION_LEVELS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.level not in range(0, 6):
            raise ValueError(f"perturbation level must lie in [1, 5], got {self.level}")

    @property
    def parameter(self) -> float | None:
        if self.level == 0:
            return None
        return PERTURBATION_LEVELS[self.kind][self.level - 1]


def perturb(image, spec: PerturbationSpec, seed: int | None = None) -> np.ndarray:
    img = check_image(image)
    p = spec.parameter
    if p is None:
        return img.copy()
    if spec.kind == "gaussian_blur":
        out = ndimage.gaussian_filter(img, sigma=(p, p, 0), mode="reflect")
    elif spec.kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        out = img + rng.normal(0.0, p, size=img.shape)
    elif spec.kind == "jpeg_compression":
        buf = io.BytesIO()
        Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="JPEG", quality=int(p))
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    elif spec.kind == "color_saturation":
        gray = img @ np.array([0.299, 0.587, 0.114])
        out = gray[..., None] + p * (img - gray[..., None])
    else:
        out = 0.5 + p * (img - 0.5)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchComposition:
    real_frac: float = 1 / 3
    single_fake_frac: float = 1 / 3
    msba_frac: float = 1 / 3

    def __post_init__(self):
        fr = (self.real_frac, self.single_fake_frac, self.msba_frac)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"composition fractions must be nonnegative and sum to 1, got {fr}")

    def counts(self, batch_size: int) -> tuple[int, int, int]:
        n_fake = math.floor(self.single_fake_frac * batch_size + 1e-9)
        n_msba = math.floor(self.msba_frac * batch_size + 1e-9)
        return batch_size - n_fake - n_msba, n_fake, n_msba


@dataclass
class Sample:
    """One training sample; kind is 'real', 'fake' or 'msba'."""

    id: str
    kind: str
    image: np.ndarray
    label: int
    intensity: np.ndarray  # H x W channel-mean forgery intensity
    alpha: np.ndarray | None  # blend-weight target, None for real images
    method: int | None = None


@dataclass
class Batch:
    samples: list[Sample]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float32)

    def intensities(self) -> np.ndarray:
        return np.stack([s.intensity for s in self.samples]).astype(np.float32)

    def alphas(self, num_methods: int) -> tuple[np.ndarray, np.ndarray]:
        alpha = np.zeros((len(self.samples), num_methods), dtype=np.float32)
        has = np.zeros(len(self.samples), dtype=bool)
        for i, s in enumerate(self.samples):
            if s.alpha is not None:
                alpha[i] = s.alpha
                has[i] = True
        return alpha, has


def _stream(items: list, rng: np.random.Generator) -> Iterator:
    while True:
        for j in rng.permutation(len(items)):
            yield items[int(j)]


def batch_iterator(
    manifest: Manifest,
    batch_size: int,
    composition: BatchComposition | None = None,
    seed: int = 0,
    split: str = "train",
    epoch: int = 0,
    msba_params: dict | None = None,
    cache: ImageCache | None = None,
) -> Iterator[Batch]:
    """Yield the batches of one epoch.

    Each batch holds ``counts(batch_size)`` real, single-method fake and
    MSBA samples. Every kind draws from its own seeded permutation; the
    epoch lasts until the longest of the active streams has been consumed
    exactly once (shorter streams are reshuffled and reused). The same
    (seed, epoch) pair always yields the same sample sequence.
    """
    from . import msba  # local import: msba depends on this module's types

    composition = composition or BatchComposition()
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_real, n_fake, n_msba = composition.counts(batch_size)
    cache = cache or ImageCache(manifest)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    groups = manifest.groups(split)
    reals = [r for r in records if r.label == 0]
    fakes = [r for r in records if r.label == 1]
    blendable = [g for g in groups.values() if g["real"] is not None and len(g["fakes"]) >= 2]
    if n_real and not reals:
        raise ValueError(f"split {split!r} has no real images")
    if n_fake and not fakes:
        raise ValueError(f"split {split!r} has no fake images")
    if n_msba and not blendable:
        raise ValueError("MSBA samples need groups with at least two forgery methods")

    params = {"beta": 1.0, "lambda_range": (0.8, 1.2), "min_intensity": 1e-3}
    params.update(msba_params or {})
    rng = np.random.default_rng([seed, epoch])
    streams = {}
    lengths = []
    for kind, count, items in (("real", n_real, reals), ("fake", n_fake, fakes), ("msba", n_msba, blendable)):
        if count:
            streams[kind] = _stream(items, np.random.default_rng([seed, epoch, len(streams) + 1]))
            lengths.append(math.ceil(len(items) / count))
    n_batches = max(lengths)
    sample_idx = 0
    for _ in range(n_batches):
        samples = []
        for kind, count in (("real", n_real), ("fake", n_fake), ("msba", n_msba)):
            for _ in range(count):
                item = next(streams[kind])
                if kind == "real":
                    img = cache.image(item)
                    samples.append(Sample(item.id, "real", img, 0, np.zeros(img.shape[:2], np.float32), None))
                elif kind == "fake":
                    img = cache.image(item)
                    real = cache.image(groups[item.group_id]["real"])
                    inten = np.abs(real.astype(np.float64) - img).mean(axis=2)
                    alpha = np.zeros(manifest.num_methods)
                    alpha[item.method] = 1.0
                    samples.append(Sample(item.id, "fake", img, 1, inten, alpha, item.method))
                else:
                    sample_rng = np.random.default_rng([seed, epoch, 7, sample_idx])
                    samples.append(msba.msba_sample(item, manifest.num_methods, cache, sample_rng, **params))
                sample_idx += 1
        order = rng.permutation(len(samples))
        yield Batch([samples[int(j)] for j in order])

