"""scikit-learn style wrappers around featurization and toy training.

Inputs are variable-length, so ``X`` is a sequence of clips (``Waveform``,
``Spectrogram`` or 1-D sample arrays at 16 kHz) rather than a 2-D matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import encoder as enc
from .spectrogram import Spectrogram, Waveform, compress_avgpool, mel_spectrogram, pad_frames
from .trainer import (Example, TrainConfig, Trainer, default_model_config, spec_stats, trim_or_pad,
                      with_mode)

_DTYPES = {"f32": np.float32, "f64": np.float64}


def check_clip(x, sample_rate: int = 16000):
    """Coerce one input clip to a ``Waveform`` or ``Spectrogram``."""
    if isinstance(x, (Waveform, Spectrogram)):
        return x
    arr = np.asarray(x)
    if arr.ndim == 1 and arr.size and np.issubdtype(arr.dtype, np.number):
        return Waveform(arr.astype(np.float64), sample_rate)
    if arr.ndim == 2 and arr.size and np.issubdtype(arr.dtype, np.number):
        return Spectrogram(arr.astype(np.float64))
    raise ValueError(f"expected a non-empty 1-D waveform or 2-D spectrogram, got shape {arr.shape}")


def check_clips(X) -> list:
    if isinstance(X, (Waveform, Spectrogram)) or (isinstance(X, np.ndarray) and X.ndim == 1):
        raise ValueError("X must be a sequence of clips, not a single clip")
    clips = [check_clip(x) for x in X]
    if not clips:
        raise ValueError("X is empty")
    return clips


def check_precision(precision: str):
    if precision not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}")
    return _DTYPES[precision]


class MelFeaturizer(TransformerMixin, BaseEstimator):
    """Waveforms to log-mel ``Spectrogram`` objects, optionally pooled and padded."""

    def __init__(self, n_mels=128, window_ms=25.0, shift_ms=10.0, avgpool=1, pad_to_multiple=None):
        self.n_mels = n_mels
        self.window_ms = window_ms
        self.shift_ms = shift_ms
        self.avgpool = avgpool
        self.pad_to_multiple = pad_to_multiple

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> list:
        out = []
        for clip in check_clips(X):
            spec = clip if isinstance(clip, Spectrogram) else mel_spectrogram(
                clip, self.window_ms, self.shift_ms, self.n_mels)
            if self.avgpool != 1:
                spec = compress_avgpool(spec, self.avgpool)
            if self.pad_to_multiple:
                spec = pad_frames(spec, self.pad_to_multiple)
            out.append(spec)
        return out


class _ASTClassifier(ClassifierMixin, BaseEstimator):
    _mode = "elastic"

    def _examples(self, X, y=None):
        clips = check_clips(X)
        if y is None:
            # no sample ids: prediction inputs must not hit the training feature cache
            return [Example(c, 0) for c in clips]
        return [Example(c, int(l), i) for i, (c, l) in enumerate(zip(clips, y))]

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           budget=self.budget, compression=self.compression,
                           factors=tuple(self.factors or ()), mode=self._mode,
                           fixed_T=getattr(self, "fixed_T", 1024), seed=self.seed)

    def fit(self, X, y):
        y = np.asarray(y)
        if y.ndim != 1:
            raise ValueError("y must be 1-D")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        clips = check_clips(X)
        if len(clips) != len(y):
            raise ValueError(f"X has {len(clips)} clips but y has {len(y)} labels")
        data = self._examples(clips, self.label_encoder_.transform(y))
        mc = default_model_config(len(self.classes_), self.patch_size, self.n_mels, dim=self.dim,
                                  heads=self.heads, layers=self.layers)
        params = enc.init_params(with_mode(mc, self._mode), self.seed,
                                 check_precision(self.precision))
        self.trainer_ = Trainer(params, self._train_config(), self.n_mels,
                                spec_stats(data, self.n_mels))
        self.trainer_.fit(data)
        self.history_ = list(self.trainer_.history)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        tr = self.trainer_
        seqs = [tr.sequence(ex) for ex in self._examples(X)]
        if self._mode == "fixed":
            T = (tr.cfg.fixed_T // tr.params.config.patch_size) * tr.n_freq
            seqs = [trim_or_pad(s, T) for s in seqs]
        return tr.predict_sequences(seqs)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.label_encoder_.inverse_transform(scores.argmax(1))


class ElasticASTClassifier(_ASTClassifier):
    """Packed variable-length training; clips are never cut or padded."""

    _mode = "elastic"

    def __init__(self, dim=32, heads=2, layers=1, patch_size=16, n_mels=32, lr=1e-3, epochs=1,
                 batch_size=12, budget=2048, compression="none", factors=None, seed=0,
                 precision="f64"):
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.patch_size = patch_size
        self.n_mels = n_mels
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.budget = budget
        self.compression = compression
        self.factors = factors
        self.seed = seed
        self.precision = precision


class FixedLengthASTClassifier(_ASTClassifier):
    """Baseline: every clip trimmed or padded to ``fixed_T`` frames, [cls] pooling."""

    _mode = "fixed"

    def __init__(self, fixed_T=1024, dim=32, heads=2, layers=1, patch_size=16, n_mels=32, lr=1e-3,
                 epochs=1, batch_size=12, compression="none", factors=None, seed=0,
                 precision="f64"):
        self.fixed_T = fixed_T
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.patch_size = patch_size
        self.n_mels = n_mels
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.compression = compression
        self.factors = factors
        self.seed = seed
        self.precision = precision

    @property
    def budget(self):
        return self.fixed_T
