"""Loss terms, their weighted combination, and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

BCE_EPS = 1e-7
KL_EPS = 1e-8

PRESETS = {
    "default": (1.0, 0.5, 1.0, 0.1),
    # similarity weighted like classification
    "equal": (1.0, 1.0, 1.0, 0.1),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_sim: float = 0.5
    lambda_int: float = 1.0
    lambda_wgt: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name not in PRESETS:
            raise KeyError(f"unknown loss-weight preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(*PRESETS[name])


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_sim: torch.Tensor
    l_int: torch.Tensor
    l_wgt: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_cls", "l_sim", "l_int", "l_wgt", "total")}


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _check_labels(y: torch.Tensor) -> None:
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")


def bce(p, y, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    p = _as_tensor(p)
    y = _as_tensor(y, p)
    _check_labels(y)
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    return loss.mean() if reduction == "mean" else loss


def similarity_loss(s, y, kappa, reduction: str = "mean") -> torch.Tensor:
    s = _as_tensor(s)
    return bce(torch.sigmoid(_as_tensor(kappa, s) * s), y, reduction)


def smooth_l1(pred, target, reduction: str = "mean") -> torch.Tensor:
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs()
    loss = torch.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)
    if reduction == "mean":
        return loss.mean()
    return loss.reshape(loss.shape[0], -1).mean(dim=1)  # per sample


def kl_weights(alpha, alpha_hat, reduction: str = "mean") -> torch.Tensor:
    """KL(alpha || alpha_hat) over the last axis.

    Rows where some ``alpha_i > 0`` meets ``alpha_hat_i < 1e-8`` get alpha_hat
    floored at 1e-8 and renormalized; other rows are used as given.
    """
    alpha_hat = _as_tensor(alpha_hat)
    alpha = _as_tensor(alpha, alpha_hat)
    for name, v in (("alpha", alpha), ("alpha_hat", alpha_hat)):
        if (v < -1e-6).any() or ((v.sum(dim=-1) - 1).abs() > 1e-6).any():
            raise ValueError(f"{name} is not on the probability simplex")
    # floor and renormalize only rows where a positive target meets a near-zero prediction
    needs = ((alpha > 0) & (alpha_hat < KL_EPS)).any(dim=-1, keepdim=True)
    floored = alpha_hat.clamp_min(KL_EPS)
    q = torch.where(needs, floored / floored.sum(dim=-1, keepdim=True), alpha_hat)
    safe = torch.where(alpha > 0, alpha, torch.ones_like(alpha))
    terms = torch.where(alpha > 0, alpha * (torch.log(safe) - torch.log(q)), torch.zeros_like(alpha))
    kl = terms.sum(dim=-1).clamp_min(0.0)  # round-off can dip below zero for equal inputs
    if reduction == "mean":
        return kl.mean() if kl.dim() else kl
    return kl


def weighted_total(l_cls, l_sim, l_int, l_wgt, weights: LossWeights) -> LossBreakdown:
    terms = [_as_tensor(t) for t in (l_cls, l_sim, l_int, l_wgt)]
    total = (
        weights.lambda_cls * terms[0]
        + weights.lambda_sim * terms[1]
        + weights.lambda_int * terms[2]
        + weights.lambda_wgt * terms[3]
    )
    return LossBreakdown(*terms, total)


def total_loss(output, labels, intensity_targets, alpha_targets, has_alpha, weights: LossWeights) -> LossBreakdown:
    """Batch-mean multi-task loss for one model output.

    Every sample contributes to the intensity term (real images against an
    all-zero target); the blend-weight term averages over samples with a
    known blend (``has_alpha``) and is zero when there are none. Terms whose
    weight is zero are not evaluated.
    """
    y = _as_tensor(labels, output.fused_prob)
    l_cls = bce(output.fused_prob, y)
    zero = output.fused_prob.sum() * 0.0
    l_sim = similarity_loss(output.s, y, output.kappa) if weights.lambda_sim > 0 else zero
    if weights.lambda_int > 0 and output.intensity is not None:
        l_int = smooth_l1(output.intensity.combined, _as_tensor(intensity_targets, output.fused_prob))
    else:
        l_int = zero
    has = torch.as_tensor(np.asarray(has_alpha, dtype=bool))
    if weights.lambda_wgt > 0 and output.alpha_hat is not None and bool(has.any()):
        alpha = _as_tensor(alpha_targets, output.alpha_hat)
        l_wgt = kl_weights(alpha[has], output.alpha_hat[has])
    else:
        l_wgt = zero
    return weighted_total(l_cls, l_sim, l_int, l_wgt, weights)


def grad_check(
    f: Callable[[np.ndarray], float],
    x,
    grad: np.ndarray | Callable[[np.ndarray], np.ndarray],
    eps: float = 1e-5,
    indices=None,
) -> float:
    """Largest relative error between ``grad`` and central differences of ``f`` at ``x``.

    Relative error per coordinate is ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)``.
    """
    x = np.array(x, dtype=np.float64).ravel()
    g_a = np.asarray(grad(x.copy()) if callable(grad) else grad, dtype=np.float64).ravel()
    if g_a.shape != x.shape:
        raise ValueError("analytic gradient and point differ in size")
    idx = range(x.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        g_n = (fp - fm) / (2 * eps)
        rel = abs(g_a[i] - g_n) / max(1e-8, abs(g_a[i]) + abs(g_n))
        worst = max(worst, rel)
    return worst


def torch_grad_check(fn: Callable[[], torch.Tensor], params: list[torch.Tensor], eps: float = 1e-5) -> float:
    """Finite-difference check of ``fn`` over every entry of ``params`` (double precision).

    ``fn`` recomputes the scalar loss from the current parameter values.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need double-precision parameters")
    loss = fn()
    analytic = torch.autograd.grad(loss, params)
    flat_grad = torch.cat([g.reshape(-1) for g in analytic]).numpy()
    views = [p.data.view(-1) for p in params]
    sizes = [v.numel() for v in views]
    offsets = np.cumsum([0, *sizes])

    def locate(i):
        k = int(np.searchsorted(offsets, i, side="right") - 1)
        return views[k], i - offsets[k]

    with torch.no_grad():
        x0 = torch.cat([v.clone() for v in views]).numpy()

        def f(x):
            # only the coordinate that differs from x0 is written back
            diff = np.flatnonzero(x != x0)
            for i in diff:
                v, j = locate(i)
                v[j] = float(x[i])
            val = float(fn())
            for i in diff:
                v, j = locate(i)
                v[j] = float(x0[i])
            return val

        return grad_check(f, x0, flat_grad, eps)
