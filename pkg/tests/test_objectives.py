import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msba_clip.objectives import (
    LossWeights,
    bce,
    grad_check,
    kl_weights,
    similarity_loss,
    smooth_l1,
    weighted_total,
)


def bce_oracle(p, y):
    total = 0.0
    for pi, yi in zip(p, y):
        pi = min(max(pi, 1e-7), 1 - 1e-7)
        total += -(yi * math.log(pi) + (1 - yi) * math.log(1 - pi))
    return total / len(p)


def huber_oracle(a, b):
    vals = []
    for x, t in zip(a, b):
        d = abs(x - t)
        vals.append(0.5 * d * d if d < 1 else d - 0.5)
    return sum(vals) / len(vals)


def kl_oracle(p, q):
    if any(a > 0 and b < 1e-8 for a, b in zip(p, q)):
        q = [max(v, 1e-8) for v in q]
        z = sum(q)
        q = [v / z for v in q]
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


class TestBCE:
    def test_perfect_prediction_is_floor(self):
        assert bce(torch.tensor([1.0], dtype=torch.float64), [1]).item() == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)

    def test_half(self):
        assert bce(torch.tensor([0.5], dtype=torch.float64), [0]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_oracle(self, rng):
        p, y = rng.random(50), rng.integers(0, 2, 50)
        assert abs(bce(p, y).item() - bce_oracle(p, y)) <= 1e-12

    def test_rejects_soft_labels(self):
        with pytest.raises(ValueError):
            bce([0.3], [0.5])


class TestSimilarityLoss:
    def test_zero_similarity(self):
        assert similarity_loss([0.0], [1], 10.0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_oracle(self, rng):
        s, y = rng.uniform(-1, 1, 40), rng.integers(0, 2, 40)
        oracle = bce_oracle([1 / (1 + math.exp(-7.0 * v)) for v in s], y)
        assert abs(similarity_loss(s, y, 7.0).item() - oracle) <= 1e-12


class TestSmoothL1:
    @pytest.mark.parametrize("d,expected", [(0.0, 0.0), (0.5, 0.125), (1.0, 0.5), (3.0, 2.5)])
    def test_piecewise(self, d, expected):
        assert smooth_l1(torch.tensor([[d]], dtype=torch.float64), [[0.0]]).item() == pytest.approx(expected, abs=1e-15)

    def test_matches_oracle(self, rng):
        a, b = rng.normal(0, 2, (4, 6)), rng.normal(0, 2, (4, 6))
        assert abs(smooth_l1(a, b).item() - huber_oracle(a.ravel(), b.ravel())) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            smooth_l1(np.zeros((2, 3)), np.zeros((3, 2)))


class TestKL:
    def test_equal_is_zero(self):
        assert kl_weights([0.25] * 4, [0.25] * 4).item() == 0.0

    def test_equal_one_hot_is_zero(self):
        assert kl_weights([0.0, 1.0, 0.0], [0.0, 1.0, 0.0]).item() == 0.0

    def test_known_value(self):
        assert kl_weights([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_prediction_is_floored(self):
        v = kl_weights([0.5, 0.5], [1.0, 0.0]).item()
        assert math.isfinite(v) and v > 5

    def test_off_simplex(self):
        with pytest.raises(ValueError):
            kl_weights([0.6, 0.6], [0.5, 0.5])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_gibbs(self, m, seed):
        r = np.random.default_rng(seed)
        p, q = r.dirichlet(np.ones(m)), r.dirichlet(np.ones(m))
        assert kl_weights(p, q).item() >= 0
        assert abs(kl_weights(p, q).item() - kl_oracle(p, q)) <= 1e-12


class TestWeights:
    def test_defaults(self):
        assert LossWeights() == LossWeights.preset("default") == LossWeights(1.0, 0.5, 1.0, 0.1)

    def test_equal_preset(self):
        assert LossWeights.preset("equal").lambda_sim == 1.0

    def test_negative(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_int=-1.0)

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            LossWeights.preset("nope")

    def test_total_is_weighted_sum(self):
        out = weighted_total(1.0, 2.0, 3.0, 4.0, LossWeights(1.0, 0.5, 1.0, 0.1))
        assert out.total.item() == pytest.approx(1 + 1 + 3 + 0.4, abs=1e-12)
        assert out.as_floats()["l_int"] == 3.0


class TestGradCheck:
    def test_quadratic(self, rng):
        x = rng.normal(size=5)
        assert grad_check(lambda v: float((v**2).sum()), x, 2 * x) < 1e-8

    def test_detects_wrong_gradient(self, rng):
        x = rng.normal(size=5)
        assert grad_check(lambda v: float((v**2).sum()), x, 3 * x) > 0.1

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            grad_check(lambda v: 0.0, np.zeros(3), np.zeros(2))
