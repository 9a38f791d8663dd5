"""Scikit-learn style estimators wrapping the training pipeline.

Every learnable stage is exposed as a fit/transform or fit/predict
estimator so contour models compose with sklearn pipelines and model
selection tools. Constructor arguments are stored verbatim (get_params
works untouched); everything learned during fit lands in trailing
underscore attributes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .contour import MAX_SHIFT_CENTS, Contour, ContourSequence
from .errors import ValidationError
from .models import embed
from .pipeline import EvalConfig, TrainConfig, fit_downstream_mlp, train_pseudotask
from .statfeat import stat_feature_matrix, zscore_block


def as_contour_list(x) -> list[Contour]:
    """Accept contours, or sequences of them, as one flat contour list."""
    out: list[Contour] = []
    for item in x:
        if isinstance(item, Contour):
            out.append(item)
        elif isinstance(item, ContourSequence):
            out.extend(item.contours)
        else:
            raise ValidationError(
                f"expected Contour or ContourSequence, got {type(item).__name__}")
    if not out:
        raise ValidationError("no contours supplied")
    return out


def as_sequence_list(x) -> list[ContourSequence]:
    """Accept contour sequences, validating element types."""
    out = []
    for item in x:
        if not isinstance(item, ContourSequence):
            raise ValidationError(
                f"expected ContourSequence, got {type(item).__name__}")
        out.append(item)
    if not out:
        raise ValidationError("no contour sequences supplied")
    return out


class StatFeatureTransformer(BaseEstimator, TransformerMixin):
    """Stateless 17-column statistical feature extractor."""

    def __init__(self, skip_short: bool = False):
        self.skip_short = skip_short

    def fit(self, X, y=None):
        as_contour_list(X)
        return self

    def transform(self, X) -> np.ndarray:
        return stat_feature_matrix(as_contour_list(X), skip_short=self.skip_short)


class BlockScaler(BaseEstimator, TransformerMixin):
    """Column z-scoring with population statistics; zero spread maps to 1."""

    def fit(self, X, y=None):
        m = check_array(X, dtype=np.float64)
        _, self.stats_ = zscore_block(m)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "stats_"):
            raise NotFittedError("BlockScaler is not fitted")
        m = check_array(X, dtype=np.float64)
        z, _ = zscore_block(m, self.stats_)
        return z


class _EmbedderBase(BaseEstimator, TransformerMixin):
    """Shared fit/transform plumbing for the pseudotask embedders.

    fit consumes ContourSequence objects (whole recordings; the
    pseudotask labels come from within-recording structure), transform
    consumes contours and returns one embedding row per contour.
    """

    task = ""

    def _train_config(self) -> TrainConfig:
        raise NotImplementedError

    def fit(self, X, y=None):
        sequences = as_sequence_list(X)
        self.checkpoint_, self.history_ = train_pseudotask(
            self.task, sequences, self._train_config())
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")
        return embed(self.checkpoint_, as_contour_list(X))


class ContextPairEmbedder(_EmbedderBase):
    """Siamese pair-classification encoder as a transformer.

    ``scheme`` picks the pairing pseudotask: ``file`` (same recording)
    or ``contiguous`` (adjacent contours). The learned 128-d encoder
    embeds single contours after fit.
    """

    def __init__(self, scheme: str = "file", width_multiplier: float = 1.0,
                 max_epochs: int = 60, batch_size: int = 50, initial_lr: float = 1e-4,
                 seed: int = 0, augmentation: bool = True,
                 max_shift_cents: float = MAX_SHIFT_CENTS,
                 n_train_samples: int = 2000, n_val_samples: int = 400,
                 resample_per_epoch: bool = False):
        self.scheme = scheme
        self.width_multiplier = width_multiplier
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.seed = seed
        self.augmentation = augmentation
        self.max_shift_cents = max_shift_cents
        self.n_train_samples = n_train_samples
        self.n_val_samples = n_val_samples
        self.resample_per_epoch = resample_per_epoch

    @property
    def task(self) -> str:
        if self.scheme not in ("file", "contiguous"):
            raise ValidationError(f"unknown pairing scheme {self.scheme!r}")
        return self.scheme

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            initial_lr=self.initial_lr, seed=self.seed,
            width_multiplier=self.width_multiplier,
            augmentation=self.augmentation, max_shift_cents=self.max_shift_cents,
            n_train_samples=self.n_train_samples, n_val_samples=self.n_val_samples,
            resample_per_epoch=self.resample_per_epoch)


class SlotFillEmbedder(_EmbedderBase):
    """Slot-filling autoencoder as a transformer over contours (20-d codes)."""

    task = "slotfill"

    def __init__(self, max_epochs: int = 100, batch_size: int = 50,
                 initial_lr: float = 1e-4, seed: int = 0, augmentation: bool = True,
                 max_shift_cents: float = MAX_SHIFT_CENTS,
                 n_train_samples: int = 2000, n_val_samples: int = 400,
                 resample_per_epoch: bool = False):
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.seed = seed
        self.augmentation = augmentation
        self.max_shift_cents = max_shift_cents
        self.n_train_samples = n_train_samples
        self.n_val_samples = n_val_samples
        self.resample_per_epoch = resample_per_epoch

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            initial_lr=self.initial_lr, seed=self.seed, width_multiplier=1.0,
            augmentation=self.augmentation, max_shift_cents=self.max_shift_cents,
            n_train_samples=self.n_train_samples, n_val_samples=self.n_val_samples,
            resample_per_epoch=self.resample_per_epoch)


class MlpClassifier(BaseEstimator, ClassifierMixin):
    """Two-hidden-layer softmax probe over fixed feature vectors."""

    def __init__(self, max_epochs: int = 100, batch_size: int = 50,
                 initial_lr: float = 1e-3, seed: int = 0):
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.seed = seed

    def fit(self, X, y):
        x = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape[0] != x.shape[0]:
            raise ValidationError(f"{y.shape[0]} labels for {x.shape[0]} rows")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValidationError("need at least two classes")
        config = EvalConfig(
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            initial_lr=self.initial_lr, seed=self.seed)
        self.model_ = fit_downstream_mlp(
            x, encoded, len(self.classes_), config, seed=self.seed)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("MlpClassifier is not fitted")
        x = check_array(X, dtype=np.float64)
        return self.classes_[self.model_.predict(x)]

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("MlpClassifier is not fitted")
        x = check_array(X, dtype=np.float64)
        z = self.model_.logits(x).data.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)
