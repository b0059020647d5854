"""Scikit-learn style estimator wrapping the full train/predict pipeline,
so the classifier composes with pipelines, grid search, and `clone`."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from . import ops
from .data import BandStats, MstdDataset, compute_band_stats, default_band_names, normalize
from .model import ModelConfig, RepKanModel
from .training import TrainConfig, predict_batched, train_epochs
from .validation import check_images, check_labels


class RepKanClassifier(BaseEstimator, ClassifierMixin):
    """Multispectral image classifier over (N, C, H, W) arrays.

    Parameters mirror the training configuration; all are plain values so
    ``get_params``/``set_params``/``clone`` behave as usual. ``fit``
    standardizes each band with the training set's statistics and stores
    them for inference.

    Examples
    --------
    >>> clf = RepKanClassifier(epochs=5, stage_widths=(8,), seed=0)
    >>> clf.fit(X_train, y_train).score(X_val, y_val)  # doctest: +SKIP
    """

    def __init__(self, grid_size=3, spline_order=3, stage_widths=(32, 64, 128),
                 blocks_per_stage=None, epochs=50, batch_size=64, lr=5e-4,
                 weight_decay=0.05, warmup_epochs=5, min_lr=1e-6,
                 augment=True, seed=0):
        self.grid_size = grid_size
        self.spline_order = spline_order
        self.stage_widths = stage_widths
        self.blocks_per_stage = blocks_per_stage
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.min_lr = min_lr
        self.augment = augment
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        widths = tuple(self.stage_widths)
        blocks = (tuple(self.blocks_per_stage) if self.blocks_per_stage is not None
                  else (1,) * len(widths))
        config = ModelConfig(
            in_channels=X.shape[1],
            stage_widths=widths,
            blocks_per_stage=blocks,
            grid_size=self.grid_size,
            spline_order=self.spline_order,
            num_classes=len(self.classes_),
            input_hw=X.shape[2:],
        )
        dataset = MstdDataset(X, encoded, [str(c) for c in self.classes_],
                              default_band_names(X.shape[1]))
        self.norm_stats_ = compute_band_stats(dataset)
        dataset = normalize(dataset, self.norm_stats_)
        self.model_ = RepKanModel(config, seed=self.seed)
        self.history_ = train_epochs(
            self.model_, dataset, None,
            TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                        weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
                        min_lr=self.min_lr, seed=self.seed, augment=self.augment))
        self.n_features_in_ = X.shape[1]
        return self

    def _check_ready(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit this classifier before predicting")
        X = check_images(X, channels=self.model_.config.in_channels)
        mean = self.norm_stats_.mean[None, :, None, None]
        std = self.norm_stats_.std[None, :, None, None]
        return (X - mean) / std

    def predict(self, X):
        X = self._check_ready(X)
        return self.classes_[predict_batched(self.model_, X)]

    def predict_proba(self, X):
        X = self._check_ready(X)
        probs = []
        for start in range(0, X.shape[0], 256):
            logits, _ = self.model_.forward(X[start : start + 256], bn_mode="eval")
            probs.append(ops.softmax(logits))
        return np.concatenate(probs)

    def fuse(self) -> "RepKanClassifier":
        """Fitted copy whose model is the fused single-branch deploy form."""
        if not hasattr(self, "model_"):
            raise NotFittedError("fit this classifier before fusing")
        fused = RepKanClassifier(**self.get_params())
        fused.classes_ = self.classes_.copy()
        fused.norm_stats_ = BandStats(self.norm_stats_.mean.copy(),
                                      self.norm_stats_.std.copy())
        fused.model_ = self.model_.fuse()
        fused.history_ = list(self.history_)
        fused.n_features_in_ = self.n_features_in_
        return fused
