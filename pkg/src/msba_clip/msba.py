"""Multivariate soft blending augmentation (MSBA).

Forged images are turned into per-pixel intensity maps ``|real - forged|``;
several maps are mixed with Dirichlet weights and the scaled blend is
subtracted from the real image. The Dirichlet weights double as a soft label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ._validation import check_same_shape, check_simplex

RAW_MAGIC = b"FIMP"
PNG_SCALE = 5.0
MAX_GAMMA_RETRIES = 100


@dataclass
class IntensityMap:
    values: np.ndarray  # H x W x C, per-channel magnitudes

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[..., None]
        if self.values.ndim != 3:
            raise ValueError(f"intensity map must be H x W x C, got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def reduce(self) -> np.ndarray:
        """Channel-mean single-channel map used for supervision and export."""
        return self.values.mean(axis=2)


@dataclass(frozen=True)
class BlendSpec:
    alpha: np.ndarray
    lam: float
    beta: float = 1.0
    lambda_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        alpha = check_simplex(self.alpha)
        object.__setattr__(self, "alpha", alpha)
        lo, hi = self.lambda_range
        if not lo <= self.lam <= hi:
            raise ValueError(f"lambda {self.lam} outside {self.lambda_range}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class SoftLabel:
    alpha: np.ndarray
    binary_label: int = 1


def intensity_map(real, forged, signed: bool = False) -> IntensityMap:
    real = np.asarray(real, dtype=np.float64)
    forged = np.asarray(forged, dtype=np.float64)
    check_same_shape(real, forged, "real and forged images")
    diff = real - forged
    return IntensityMap(diff if signed else np.abs(diff))


def sample_blend_weights(m: int, beta: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Symmetric Dirichlet draw built from ``m`` normalized Gamma(beta, 1) variates."""
    if m < 1:
        raise ValueError("number of methods must be >= 1")
    if not beta > 0:
        raise ValueError("Dirichlet concentration must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    for _ in range(MAX_GAMMA_RETRIES):
        g = rng.gamma(beta, 1.0, size=m)
        total = g.sum()
        if total > 0 and np.isfinite(total):
            return g / total
    raise RuntimeError("Gamma draws degenerate after repeated retries; beta too small")


def sample_blend_spec(
    m: int,
    beta: float = 1.0,
    lambda_range: tuple[float, float] = (0.8, 1.2),
    rng: np.random.Generator | None = None,
) -> BlendSpec:
    rng = rng if rng is not None else np.random.default_rng()
    alpha = sample_blend_weights(m, beta, rng)
    lam = float(rng.uniform(*lambda_range))
    return BlendSpec(alpha, lam, beta, tuple(lambda_range))


def blend_maps(maps: Sequence[IntensityMap], alpha) -> IntensityMap:
    alpha = check_simplex(alpha)
    if len(maps) != alpha.size:
        raise ValueError(f"{len(maps)} maps but {alpha.size} weights")
    if not maps:
        raise ValueError("need at least one map")
    stack = np.stack([mp.values for mp in maps]) if len({mp.shape for mp in maps}) == 1 else None
    if stack is None:
        raise ValueError("all intensity maps must share one shape")
    return IntensityMap(np.tensordot(alpha, stack, axes=1))


def synthesize(real, maps: Sequence[IntensityMap], spec: BlendSpec):
    """Return ``(clamp(real - lam * blend, 0, 1), soft label, pre-clamp blend)``."""
    real = np.asarray(real, dtype=np.float64)
    blended = blend_maps(maps, spec.alpha)
    check_same_shape(real, blended.values, "real image and intensity maps")
    image = np.clip(real - spec.lam * blended.values, 0.0, 1.0)
    return image, SoftLabel(spec.alpha.copy(), 1), blended


def to_patch_targets(imap: IntensityMap | np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Channel-mean, then average over non-overlapping cells of an ``grid`` partition."""
    values = imap.reduce() if isinstance(imap, IntensityMap) else np.asarray(imap, dtype=np.float64)
    if values.ndim == 3:
        values = values.mean(axis=2)
    h, w = grid
    H, W = values.shape
    if h < 1 or w < 1 or H % h or W % w:
        raise ValueError(f"map of size {(H, W)} does not divide into a {grid} grid")
    return values.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def msba_sample(
    group: dict,
    num_methods: int,
    cache,
    rng: np.random.Generator,
    beta: float = 1.0,
    lambda_range: tuple[float, float] = (0.8, 1.2),
    min_intensity: float = 1e-3,
    signed: bool = False,
    max_tries: int = 20,
):
    """Build one blended training sample from a manifest group (real + its forgeries)."""
    from .dataset import Sample

    real = cache.image(group["real"]).astype(np.float64)
    methods = sorted(group["fakes"])
    maps = [intensity_map(real, cache.image(group["fakes"][m]), signed=signed) for m in methods]
    for _ in range(max_tries):
        spec = sample_blend_spec(len(methods), beta, lambda_range, rng)
        image, label, blended = synthesize(real, maps, spec)
        if blended.reduce().mean() >= min_intensity:
            break
    alpha = np.zeros(num_methods)
    alpha[methods] = label.alpha
    return Sample(
        id=f"msba:{group['real'].group_id}",
        kind="msba",
        image=image.astype(np.float32),
        label=1,
        intensity=np.abs(blended.reduce()).astype(np.float32),
        alpha=alpha,
    )


# ---------------------------------------------------------------------------
# export formats


def write_raw_map(path: str | Path, values: np.ndarray) -> None:
    """Little-endian float32 dump preceded by ``FIMP`` and uint32 H, W, C."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", h, w, c))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_raw_map(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not a FIMP intensity-map file")
    h, w, c = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != h * w * c:
        raise ValueError(f"{path}: payload size {body.size} does not match header {(h, w, c)}")
    return body.reshape(h, w, c).astype(np.float32)


def map_to_png16(values: np.ndarray, scale: float = PNG_SCALE) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return np.clip(np.rint(arr * scale * 65535.0), 0, 65535).astype(np.uint16)


def write_png_map(path: str | Path, values: np.ndarray, scale: float = PNG_SCALE) -> None:
    Image.fromarray(map_to_png16(values, scale)).save(path, format="PNG")


def read_png_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16)
