"""scikit-learn style wrappers: a pain classifier, a SMOTE sampler and the clip normalizer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import NUM_LANDMARKS, Dataset, holdout_split, normalize_clip, smote_arrays
from .models import ModelConfig, parse_blocks
from .training import OptimizerConfig, predict_proba, train_model


def check_landmark_clips(X, n_frames: int | None = 20) -> np.ndarray:
    """Validate a batch of landmark clips ``[N, T, 68, 2]``."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 4 or X.shape[2:] != (NUM_LANDMARKS, 2):
        raise ValueError(f"expected landmark clips [N, T, 68, 2], got {X.shape}")
    if n_frames is not None and X.shape[1] != n_frames:
        raise ValueError(f"expected {n_frames} frames per clip, got {X.shape[1]}")
    return X


def check_feature_clips(X) -> np.ndarray:
    """Validate a batch of per-frame feature clips ``[N, T, D]``."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected feature clips [N, T, D], got {X.shape}")
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    check_classification_targets(y)
    return y


class PainClassifier(ClassifierMixin, BaseEstimator):
    """Binary pain/no-pain classifier over landmark or feature clips.

    ``kind='stgcn'`` or ``'stgcn_lstm'`` expects ``X[N, 20, 68, 2]``;
    ``kind='hybrid'`` expects precomputed per-frame features ``X[N, T, D]``.
    """

    def __init__(self, kind: str = "stgcn_lstm", blocks: str = "2:32,32:64,64:64",
                 lstm_hidden: int = 64, lstm_variant: str = "stacked", temporal_kernel: int = 9,
                 lr0: float = 1e-4, decay_rate: float = 0.96, decay_steps: int = 1000,
                 epochs: int = 150, batch_size: int | None = None, smote: bool = True,
                 smote_k: int = 5, val_fraction: float = 0.0, random_state: int = 0):
        self.kind = kind
        self.blocks = blocks
        self.lstm_hidden = lstm_hidden
        self.lstm_variant = lstm_variant
        self.temporal_kernel = temporal_kernel
        self.lr0 = lr0
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.smote = smote
        self.smote_k = smote_k
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self, X: np.ndarray) -> tuple[ModelConfig, OptimizerConfig]:
        model = ModelConfig(
            kind=self.kind,
            blocks=tuple(parse_blocks(self.blocks, self.temporal_kernel)),
            lstm_hidden=self.lstm_hidden,
            lstm_variant=self.lstm_variant,
            n_frames=X.shape[1],
            feature_dim=X.shape[2] if self.kind == "hybrid" else None,
        )
        opt = OptimizerConfig(lr0=self.lr0, decay_rate=self.decay_rate, decay_steps=self.decay_steps,
                              epochs=self.epochs, batch_size=self.batch_size, smote=self.smote,
                              smote_k=self.smote_k, augment=False)
        return model, opt

    def _validate(self, X, reset: bool) -> np.ndarray:
        if self.kind == "hybrid":
            X = check_feature_clips(X)
        else:
            X = check_landmark_clips(X, None if reset else self.input_shape_[0])
        if reset:
            self.input_shape_ = X.shape[1:]
            self.n_features_in_ = int(np.prod(X.shape[1:]))
        elif X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has clip shape {X.shape[1:]}, estimator was fitted on {self.input_shape_}")
        return X

    def fit(self, X, y):
        X = self._validate(X, reset=True)
        y = check_binary_labels(y, len(X))
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly two classes, got {self.classes_.tolist()}")
        data = Dataset.from_arrays(X, np.searchsorted(self.classes_, y))
        model_cfg, opt_cfg = self._configs(X)
        val = None
        if self.val_fraction > 0:
            data, val = holdout_split(data, self.val_fraction, seed=self.random_state)
        self.model_, self.history_ = train_model(model_cfg, data, opt_cfg, seed=self.random_state,
                                                 val_set=val)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, self._validate(X, reset=False))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class SMOTE(BaseEstimator):
    """Oversample the minority class to exact balance (``fit_resample`` API)."""

    def __init__(self, k_neighbors: int = 5, random_state: int = 0):
        self.k_neighbors = k_neighbors
        self.random_state = random_state

    def fit_resample(self, X, y):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        y = check_binary_labels(y, len(X))
        synth, labels, _ = smote_arrays(X, y, k=self.k_neighbors, seed=self.random_state)
        X_out = np.concatenate([X, synth.reshape((-1,) + X.shape[1:])])
        return X_out, np.concatenate([y, labels.astype(y.dtype)])


class LandmarkNormalizer(TransformerMixin, BaseEstimator):
    """Per-clip zero-mean, unit-RMS normalization of ``[N, T, 68, 2]`` clips."""

    def fit(self, X, y=None):
        check_landmark_clips(X, None)
        return self

    def transform(self, X) -> np.ndarray:
        X = check_landmark_clips(X, None)
        return np.stack([normalize_clip(x) for x in X])
