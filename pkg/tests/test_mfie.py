import pytest
import torch

from msba_clip.mfie import BlendWeightHead, IntensityDecoder, IntensityHead


def test_decoder_upsamples_four_times():
    dec = IntensityDecoder(16, 8)
    out = dec(torch.randn(2, 12, 16), (3, 4))
    assert out.shape == (2, 8, 12, 16)


def test_decoder_infers_square_grid():
    assert IntensityDecoder(8)(torch.randn(1, 16, 8)).shape == (1, 8, 16, 16)


def test_decoder_rejects_bad_grid():
    with pytest.raises(ValueError):
        IntensityDecoder(8)(torch.randn(1, 15, 8))
    with pytest.raises(ValueError):
        IntensityDecoder(8)(torch.randn(1, 12, 8), (5, 3))


def test_intensity_head_simplex_and_convexity():
    head = IntensityHead(8, 16, 4)
    pred = head(torch.randn(3, 8, 10, 10), torch.randn(3, 16))
    assert torch.allclose(pred.channel_maps.sum(dim=1), torch.ones(3, 10, 10), atol=1e-6)
    assert torch.allclose(pred.channel_weights.sum(dim=1), torch.ones(3), atol=1e-6)
    lo = pred.channel_maps.min(dim=1).values
    hi = pred.channel_maps.max(dim=1).values
    assert torch.all(pred.combined >= lo - 1e-7) and torch.all(pred.combined <= hi + 1e-7)


def test_intensity_head_weighted_sum_oracle():
    head = IntensityHead(4, 6, 3)
    pred = head(torch.randn(1, 4, 2, 2), torch.randn(1, 6))
    for i in range(2):
        for j in range(2):
            manual = sum(pred.channel_weights[0, c] * pred.channel_maps[0, c, i, j] for c in range(3))
            assert torch.isclose(pred.combined[0, i, j], manual, atol=1e-7)


def test_intensity_head_rejects_nan():
    head = IntensityHead(4, 6, 3)
    with pytest.raises(ValueError):
        head(torch.full((1, 4, 2, 2), float("nan")), torch.randn(1, 6))


def test_blend_head_starts_uniform():
    head = BlendWeightHead(16, 4)
    out = head(torch.randn(5, 16))
    assert torch.allclose(out, torch.full((5, 4), 0.25))


def test_blend_head_single_method():
    assert torch.allclose(BlendWeightHead(8, 1)(torch.randn(2, 8)), torch.ones(2, 1))
