"""scikit-learn style wrapper: fit trains, transform encodes, inverse_transform decodes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .codec import DualCodecConfig, DualCodecModel
from .dsp import DEFAULT_SAMPLE_RATE, AudioBuffer
from .metrics import mel_distance
from .quantizer import TokenMatrix
from .training import train


def check_audio(x, sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    """Coerce a 1-D array or AudioBuffer into a finite mono AudioBuffer."""
    if isinstance(x, AudioBuffer):
        audio = x
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"expected mono audio as a 1-D array, got shape {arr.shape}")
        audio = AudioBuffer(arr, sample_rate)
    if audio.sample_rate != sample_rate:
        raise ValueError(f"expected {sample_rate} Hz audio, got {audio.sample_rate} Hz")
    if len(audio) == 0:
        raise ValueError("empty audio")
    if not np.all(np.isfinite(audio.samples)):
        raise ValueError("audio contains NaN or infinite samples")
    return audio


def check_corpus(X, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[AudioBuffer]:
    """Accept a list of clips or a 2-D (n_clips, n_samples) array."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    elif isinstance(X, (AudioBuffer, np.ndarray)):
        X = [X]
    corpus = [check_audio(x, sample_rate) for x in X]
    if not corpus:
        raise ValueError("corpus is empty")
    return corpus


class DualCodecEstimator(TransformerMixin, BaseEstimator):
    """Trainable dual-stream codec.

    >>> est = DualCodecEstimator(steps=0).fit(synth_corpus(0, 2, 1.0))   # doctest: +SKIP
    >>> audio = est.inverse_transform(est.transform(clips))             # doctest: +SKIP
    """

    def __init__(self, variant="25hz", n_layers=8, rvq1_size=1024, rest_size=1024, latent_dim=64,
                 steps=100, batch_size=4, learning_rate=1e-4, seed=0, encode_layers=None):
        self.variant = variant
        self.n_layers = n_layers
        self.rvq1_size = rvq1_size
        self.rest_size = rest_size
        self.latent_dim = latent_dim
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.encode_layers = encode_layers

    def _config(self) -> DualCodecConfig:
        return DualCodecConfig(variant=self.variant, n_layers=self.n_layers, rvq1_size=self.rvq1_size,
                               rest_size=self.rest_size, latent_dim=self.latent_dim,
                               learning_rate=self.learning_rate)

    def fit(self, X, y=None):
        cfg = self._config()
        corpus = check_corpus(X, cfg.sample_rate)
        self.model_ = DualCodecModel(cfg, seed=self.seed)
        self.loss_history_ = train(self.model_, corpus, self.steps, self.batch_size, self.seed)
        self.frame_rate_ = cfg.frame_rate
        return self

    @classmethod
    def from_model(cls, model: DualCodecModel) -> "DualCodecEstimator":
        cfg = model.cfg
        est = cls(variant=cfg.variant, n_layers=cfg.n_layers, rvq1_size=cfg.rvq1_size, rest_size=cfg.rest_size,
                  latent_dim=cfg.latent_dim, learning_rate=cfg.learning_rate, steps=0)
        est.model_, est.loss_history_, est.frame_rate_ = model, [], cfg.frame_rate
        return est

    def transform(self, X) -> list[TokenMatrix]:
        check_is_fitted(self, "model_")
        corpus = check_corpus(X, self.model_.cfg.sample_rate)
        return [self.model_.encode(a, self.encode_layers) for a in corpus]

    def inverse_transform(self, tokens) -> list[AudioBuffer]:
        check_is_fitted(self, "model_")
        if isinstance(tokens, TokenMatrix):
            tokens = [tokens]
        return [self.model_.decode(t) for t in tokens]

    def score(self, X, y=None) -> float:
        """Negative mean mel distance of the round trip (higher is better)."""
        check_is_fitted(self, "model_")
        corpus = check_corpus(X, self.model_.cfg.sample_rate)
        recon = self.inverse_transform(self.transform(corpus))
        return -float(np.mean([mel_distance(a, r) for a, r in zip(corpus, recon)]))
