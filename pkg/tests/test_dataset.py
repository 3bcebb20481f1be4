import json

import numpy as np
import pytest

from msba_clip.dataset import (
    METHOD_NAMES,
    PERTURBATION_KINDS,
    BatchComposition,
    ImageCache,
    ImageRecord,
    Manifest,
    ManifestError,
    PerturbationSpec,
    SyntheticConfig,
    apply_forgery_method,
    batch_iterator,
    generate_synthetic_corpus,
    load_manifest,
    make_real_image,
    perturb,
    random_face_mask,
)


def rec(id_, label, method, gid, split="train", mask=None):
    return ImageRecord(id_, f"{id_}.png", label, method, gid, split, mask)


class TestRecords:
    def test_real_with_method_rejected(self):
        with pytest.raises(ManifestError):
            rec("a", 0, 1, "g")

    def test_fake_without_method_rejected(self):
        with pytest.raises(ManifestError):
            rec("a", 1, None, "g")

    def test_unknown_split(self):
        with pytest.raises(ManifestError):
            rec("a", 0, None, "g", split="dev")

    def test_duplicate_ids(self):
        with pytest.raises(ManifestError):
            Manifest([rec("a", 0, None, "g"), rec("a", 0, None, "h")], 2)

    def test_dangling_group(self):
        with pytest.raises(ManifestError, match="dangling"):
            Manifest([rec("f", 1, 0, "g")], 2)

    def test_group_split_across_splits_is_dangling(self):
        with pytest.raises(ManifestError):
            Manifest([rec("r", 0, None, "g", "train"), rec("f", 1, 0, "g", "test")], 2)

    def test_method_out_of_range(self):
        with pytest.raises(ManifestError):
            Manifest([rec("r", 0, None, "g"), rec("f", 1, 3, "g")], 2)


class TestLoadManifest:
    def test_round_trip(self, tmp_path):
        m = Manifest([rec("r", 0, None, "g"), rec("f", 1, 1, "g", mask="m.png")], 2, root=tmp_path)
        m.save(tmp_path / "manifest.jsonl")
        loaded = load_manifest(tmp_path / "manifest.jsonl")
        assert loaded.records == m.records
        assert loaded.num_methods == 2

    def test_bad_json_line_number(self, tmp_path):
        good = rec("r", 0, None, "g").to_json()
        (tmp_path / "m.jsonl").write_text(good + "\n{oops\n")
        with pytest.raises(ManifestError, match=":2:"):
            load_manifest(tmp_path / "m.jsonl")

    def test_missing_key(self, tmp_path):
        obj = json.loads(rec("r", 0, None, "g").to_json())
        del obj["split"]
        (tmp_path / "m.jsonl").write_text(json.dumps(obj) + "\n")
        with pytest.raises(ManifestError, match=":1:"):
            load_manifest(tmp_path / "m.jsonl")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")


class TestSynthetic:
    def test_counts_and_structure(self, small_corpus):
        m = small_corpus
        assert len(m) == 12 * 5
        assert sum(r.label == 0 for r in m.records) == 12
        for split in ("train", "val", "test"):
            for g in m.groups(split).values():
                assert g["real"] is not None
                assert sorted(g["fakes"]) == [0, 1, 2, 3]
        assert m.image_size == (32, 32)

    def test_split_sizes(self, small_corpus):
        sizes = {s: len(small_corpus.groups(s)) for s in ("train", "val", "test")}
        assert sizes == {"train": 9, "val": 2, "test": 1}

    def test_forgery_confined_to_mask(self, small_corpus):
        cache = ImageCache(small_corpus)
        for g in small_corpus.groups("train").values():
            real = cache.image(g["real"])
            for f in g["fakes"].values():
                mask = cache.mask(f)
                assert 0.01 <= mask.mean() <= 0.5
                diff = np.abs(cache.image(f) - real).max(axis=2)
                assert np.all(diff[~mask] == 0)
                assert diff[mask].max() > 0

    def test_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(3, (16, 16), 4, seed=11, patch_size=4)
        generate_synthetic_corpus(cfg, tmp_path / "a")
        generate_synthetic_corpus(cfg, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SyntheticConfig(4, (30, 30), patch_size=8)
        with pytest.raises(ValueError):
            SyntheticConfig(4, num_methods=5)
        with pytest.raises(ValueError):
            SyntheticConfig(0)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            generate_synthetic_corpus(SyntheticConfig(1, (16, 16), patch_size=4), blocker / "sub")

    @pytest.mark.parametrize("method", range(4))
    def test_methods_are_distinct_and_local(self, method, rng):
        img = make_real_image((32, 32), rng)
        mask = random_face_mask((32, 32), rng)
        forged, used = apply_forgery_method(img, method, 5, mask=mask)
        assert used is mask or np.array_equal(used, mask)
        assert np.array_equal(forged[~mask], img[~mask])
        others = [apply_forgery_method(img, m, 5, mask=mask)[0] for m in range(4) if m != method]
        assert all(not np.array_equal(forged, o) for o in others)

    def test_color_shift_exact(self):
        img = np.full((4, 4, 3), 0.5)
        mask = np.zeros((4, 4), bool)
        mask[1:3, 1:3] = True
        forged, _ = apply_forgery_method(img, 2, 0, mask=mask, shift=0.1)
        np.testing.assert_allclose(forged[1, 1], 0.6)
        np.testing.assert_allclose(forged[0, 0], 0.5)

    def test_bad_method(self, rng):
        with pytest.raises(ValueError):
            apply_forgery_method(rng.random((8, 8, 3)), 4, 0)

    def test_method_names(self):
        assert len(METHOD_NAMES) == 4


class TestPerturbations:
    def test_level_table(self):
        assert PerturbationSpec("jpeg_compression", 5).parameter == 10
        assert PerturbationSpec("gaussian_blur", 1).parameter == 0.5
        assert PerturbationSpec("gaussian_noise", 3).parameter == 0.03

    def test_level_zero_identity(self, rng):
        img = rng.random((8, 8, 3))
        assert np.array_equal(perturb(img, PerturbationSpec("gaussian_noise", 0), 1), img)

    def test_invalid(self):
        with pytest.raises(ValueError):
            PerturbationSpec("gaussian_blur", 6)
        with pytest.raises(ValueError):
            PerturbationSpec("rotate", 1)

    def test_noise_seeded(self, rng):
        img = rng.random((8, 8, 3))
        spec = PerturbationSpec("gaussian_noise", 1)
        assert np.array_equal(perturb(img, spec, 3), perturb(img, spec, 3))

    @pytest.mark.parametrize("kind", [k for k in PERTURBATION_KINDS if k != "gaussian_noise"])
    def test_deterministic_without_seed(self, kind, rng):
        img = rng.random((16, 16, 3))
        a = perturb(img, PerturbationSpec(kind, 3))
        assert np.array_equal(a, perturb(img, PerturbationSpec(kind, 3)))
        assert a.min() >= 0 and a.max() <= 1

    def test_noise_mse_monotone(self, rng):
        img = np.full((16, 16, 3), 0.5)
        mse = []
        for level in range(1, 6):
            spec = PerturbationSpec("gaussian_noise", level)
            mse.append(np.mean([np.mean((perturb(img, spec, s) - img) ** 2) for s in range(50)]))
        assert all(a <= b for a, b in zip(mse, mse[1:]))

    def test_contrast_oracle(self):
        img = np.array([[[0.25, 0.5, 0.75]]])
        np.testing.assert_allclose(perturb(img, PerturbationSpec("color_contrast", 2))[0, 0], [0.2, 0.5, 0.8])

    def test_saturation_keeps_gray(self):
        img = np.full((2, 2, 3), 0.4)
        np.testing.assert_allclose(perturb(img, PerturbationSpec("color_saturation", 5)), img, atol=1e-12)


class TestBatching:
    def test_composition_counts(self):
        assert BatchComposition().counts(32) == (12, 10, 10)
        assert BatchComposition(1 / 3, 2 / 3, 0).counts(30) == (10, 20, 0)

    def test_bad_composition(self):
        with pytest.raises(ValueError):
            BatchComposition(0.5, 0.5, 0.5)

    def test_batches(self, small_corpus):
        batches = list(batch_iterator(small_corpus, 6, seed=1))
        # 36 fakes / 2 per batch is the longest stream
        assert len(batches) == 18
        for b in batches:
            kinds = sorted(s.kind for s in b.samples)
            assert kinds == ["fake", "fake", "msba", "msba", "real", "real"]
            alpha, has = b.alphas(4)
            assert np.allclose(alpha[has].sum(axis=1), 1.0)
            assert not has[[s.kind == "real" for s in b.samples]].any()
            assert b.images().shape == (6, 32, 32, 3)

    def test_reproducible(self, small_corpus):
        a = [b.ids for b in batch_iterator(small_corpus, 6, seed=4, epoch=2)]
        b = [b.ids for b in batch_iterator(small_corpus, 6, seed=4, epoch=2)]
        c = [b.ids for b in batch_iterator(small_corpus, 6, seed=4, epoch=3)]
        assert a == b and a != c

    def test_fake_targets_match_difference(self, small_corpus):
        cache = ImageCache(small_corpus)
        batch = next(batch_iterator(small_corpus, 6, seed=0, cache=cache))
        for s in batch.samples:
            if s.kind == "fake":
                rec_ = small_corpus.get(s.id)
                real = cache.image(small_corpus.groups("train")[rec_.group_id]["real"])
                np.testing.assert_allclose(s.intensity, np.abs(real - s.image).mean(axis=2), atol=1e-7)
