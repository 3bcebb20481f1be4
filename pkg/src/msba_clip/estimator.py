"""scikit-learn style wrapper around training and scoring."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_images
from .dataset import ImageCache, Manifest, load_manifest
from .evaluate import predict_maps, score_images
from .model import ModelConfig, load_checkpoint
from .objectives import LossWeights
from .train import MSBAParams, TrainConfig, train


class MSBACLIPDetector(ClassifierMixin, BaseEstimator):
    """Face-forgery detector trained with soft-blended augmentation.

    ``fit`` takes a :class:`Manifest` (or a path to one) because MSBA needs
    the real/forged group structure, which plain ``(X, y)`` arrays lack.
    Prediction methods accept image stacks of shape ``(n, H, W, 3)`` in [0, 1].
    """

    def __init__(self, image_size=(64, 64), patch_size=8, d_v=128, d_t=64, depth=4, heads=4,
                 mip_hidden=128, num_fake_prompts=16, batch_size=32, epochs=10, lr_init=3e-4,
                 lr_final=3e-6, weight_decay=0.05, loss_weights=(1.0, 0.5, 1.0, 0.1), beta=1.0,
                 lambda_range=(0.8, 1.2), batch_composition=(1 / 3, 1 / 3, 1 / 3),
                 prompt_mode="unknown_only", random_state=0, work_dir=None):
        self.image_size = image_size
        self.patch_size = patch_size
        self.d_v = d_v
        self.d_t = d_t
        self.depth = depth
        self.heads = heads
        self.mip_hidden = mip_hidden
        self.num_fake_prompts = num_fake_prompts
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.weight_decay = weight_decay
        self.loss_weights = loss_weights
        self.beta = beta
        self.lambda_range = lambda_range
        self.batch_composition = batch_composition
        self.prompt_mode = prompt_mode
        self.random_state = random_state
        self.work_dir = work_dir

    def _train_config(self, num_methods: int) -> TrainConfig:
        model = ModelConfig(image_size=tuple(self.image_size), patch_size=self.patch_size, d_v=self.d_v,
                            d_t=self.d_t, depth=self.depth, heads=self.heads, mip_hidden=self.mip_hidden,
                            num_fake_prompts=self.num_fake_prompts, num_methods=num_methods)
        return TrainConfig(model=model, loss_weights=LossWeights(*self.loss_weights),
                           msba=MSBAParams(self.beta, tuple(self.lambda_range)), batch_size=self.batch_size,
                           epochs=self.epochs, lr_init=self.lr_init, lr_final=self.lr_final,
                           weight_decay=self.weight_decay, seed=int(self.random_state or 0),
                           batch_composition=tuple(self.batch_composition), prompt_mode=self.prompt_mode)

    def fit(self, X, y=None):
        manifest = X if isinstance(X, Manifest) else load_manifest(X)
        if y is not None:
            raise ValueError("labels are read from the manifest; pass y=None")
        config = self._train_config(manifest.num_methods)
        if self.work_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                result = train(config, manifest, tmp, cache=ImageCache(manifest))
                self.checkpoint_ = None
        else:
            result = train(config, manifest, self.work_dir, cache=ImageCache(manifest))
            self.checkpoint_ = Path(result.checkpoint)
        self.model_ = result.model
        self.config_ = config
        self.classes_ = np.array([0, 1])
        self.best_val_auc_ = result.best_val_auc
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "MSBACLIPDetector":
        model, _ = load_checkpoint(path)
        cfg = model.config
        est = cls(image_size=cfg.image_size, patch_size=cfg.patch_size, d_v=cfg.d_v, d_t=cfg.d_t, depth=cfg.depth,
                  heads=cfg.heads, mip_hidden=cfg.mip_hidden, num_fake_prompts=cfg.num_fake_prompts)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        est.checkpoint_ = Path(path)
        return est

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("MSBACLIPDetector is not fitted yet; call fit first")

    def _images(self, X) -> np.ndarray:
        X = check_images(X)
        if tuple(X.shape[1:3]) != tuple(self.model_.config.image_size):
            raise ValueError(f"expected images of size {self.model_.config.image_size}, got {X.shape[1:3]}")
        return X.astype(np.float32)

    def decision_function(self, X) -> np.ndarray:
        """Fused fake probability for each image."""
        self._check_fitted()
        return score_images(self.model_, self._images(X))["y_hat"]

    def predict_proba(self, X) -> np.ndarray:
        p = self.decision_function(X)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) >= 0.5).astype(np.int64)

    def intensity_maps(self, X) -> np.ndarray:
        """Predicted forgery-intensity maps, shape (n, 4h, 4w) for an h x w patch grid."""
        self._check_fitted()
        return predict_maps(self.model_, self._images(X))
