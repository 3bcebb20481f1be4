import numpy as np
import pytest

from msba_clip.dataset import ImageCache, PerturbationSpec
from msba_clip.evaluate import (
    downsample_mask,
    evaluate,
    export_intensity_maps,
    held_out_manifest,
    localization_iou,
    read_scores,
    report_from_scores,
    robustness_sweep,
)
from msba_clip.metrics import SingleClassError
from msba_clip.msba import read_png_map, read_raw_map


def test_evaluate_writes_scores(trained_tiny, small_corpus, tmp_path):
    rep = evaluate(trained_tiny.checkpoint, small_corpus, "val", out_dir=tmp_path)
    rows = read_scores(tmp_path / "scores.csv")
    assert len(rows) == len(small_corpus.split("val"))
    assert 0 <= rep.frame_auc <= 1
    assert rep.counts["videos"] == rep.counts["frames"]  # one frame per (group, label, method)
    assert (tmp_path / "report.json").is_file()


def test_single_class_split(trained_tiny, small_corpus):
    reals_only = small_corpus.subset([r for r in small_corpus.records if r.split != "test"] +
                                     [r for r in small_corpus.records if r.split == "test" and r.label == 0])
    with pytest.raises(SingleClassError):
        evaluate(trained_tiny.model, reals_only, "test")
    rep = evaluate(trained_tiny.model, reals_only, "test", require_auc=False)
    assert rep.frame_auc is None and 0 <= rep.frame_acc <= 1


def test_report_video_averaging():
    from msba_clip.dataset import ImageRecord

    recs = [ImageRecord("a", "a", 0, None, "g", "test"), ImageRecord("b", "b", 1, 0, "g", "test", "m"),
            ImageRecord("c", "c", 1, 0, "g", "test", "m")]
    rep = report_from_scores(recs, np.array([0.5, 0.9, 0.3]), 1)
    assert rep.counts["videos"] == 2
    assert rep.video_auc == 1.0 and rep.frame_auc == 0.5


def test_perturbed_evaluation_is_deterministic(trained_tiny, small_corpus):
    spec = PerturbationSpec("gaussian_noise", 3)
    a = evaluate(trained_tiny.model, small_corpus, "val", perturbation=spec, seed=1)
    b = evaluate(trained_tiny.model, small_corpus, "val", perturbation=spec, seed=1)
    assert a.frame_auc == b.frame_auc


def test_robustness_grid(trained_tiny, small_corpus, tmp_path):
    rep = robustness_sweep(trained_tiny.model, small_corpus, "val", out_dir=tmp_path)
    assert len(rep.rows()) == 26
    assert rep.clean_auc == evaluate(trained_tiny.model, small_corpus, "val").frame_auc
    assert len((tmp_path / "robustness.csv").read_text().splitlines()) == 27


def test_held_out_manifest(small_corpus):
    tr, te = held_out_manifest(small_corpus, 2)
    assert all(r.method != 2 for r in tr.records)
    assert {r.method for r in te.records} == {None, 2}
    assert all(r.split == "test" for r in te.records)


def test_downsample_mask():
    m = np.zeros((4, 4), bool)
    m[:2, :2] = True
    m[2, 2] = True
    np.testing.assert_array_equal(downsample_mask(m, (2, 2)), [[True, False], [False, False]])


def test_localization_keys(trained_tiny, small_corpus):
    out = localization_iou(trained_tiny.model, small_corpus, "val")
    assert set(out) == {"mean_iou", "baseline_iou", "n"}
    assert 0 <= out["baseline_iou"] <= 1 and out["n"] == 8


def test_export_maps(trained_tiny, small_corpus, tmp_path):
    fake = next(r for r in small_corpus.split("val") if r.label == 1)
    real = next(r for r in small_corpus.split("val") if r.label == 0)
    paths = export_intensity_maps(trained_tiny.model, small_corpus, [fake.id, real.id], tmp_path)
    assert all(p.exists() for p in paths)
    gt = read_raw_map(tmp_path / f"{fake.id}_gt.fimp")[..., 0]
    assert gt.shape == (16, 16) and gt.max() > 0
    assert read_raw_map(tmp_path / f"{real.id}_gt.fimp").max() == 0
    assert read_png_map(tmp_path / f"{fake.id}_pred.png").dtype == np.uint16
    with pytest.raises(KeyError):
        export_intensity_maps(trained_tiny.model, small_corpus, ["missing"], tmp_path)
