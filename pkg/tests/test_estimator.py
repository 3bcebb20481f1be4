import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from msba_clip.dataset import ImageCache
from msba_clip.estimator import MSBACLIPDetector

TINY = dict(image_size=(32, 32), patch_size=8, d_v=16, d_t=8, depth=1, heads=2, mip_hidden=16,
            num_fake_prompts=4, batch_size=6, epochs=1, lr_init=1e-3, lr_final=1e-5)


def test_params_round_trip():
    est = MSBACLIPDetector(**TINY)
    assert est.get_params()["d_v"] == 16
    assert clone(est).get_params() == est.get_params()


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MSBACLIPDetector().predict(np.zeros((1, 64, 64, 3)))


def test_fit_predict(small_corpus, tmp_path):
    est = MSBACLIPDetector(**TINY, work_dir=tmp_path).fit(small_corpus)
    cache = ImageCache(small_corpus)
    recs = small_corpus.split("val")
    X = np.stack([cache.image(r) for r in recs])
    proba = est.predict_proba(X)
    assert proba.shape == (len(recs), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(np.unique(est.predict(X))) <= {0, 1}
    assert est.intensity_maps(X[:2]).shape == (2, 16, 16)
    again = MSBACLIPDetector.from_checkpoint(est.checkpoint_)
    np.testing.assert_array_equal(again.decision_function(X), est.decision_function(X))
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 16, 16, 3)))


def test_fit_rejects_y(small_corpus):
    with pytest.raises(ValueError):
        MSBACLIPDetector(**TINY).fit(small_corpus, y=[0, 1])
