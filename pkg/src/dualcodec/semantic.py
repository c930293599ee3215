"""Semantic stream: frozen 50 Hz feature extractor, pooling, ResNet VQ-VAE."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Module, ResNet, avg_pool
from .dsp import AudioBuffer, FeatureMap, log_mel_features
from .quantizer import ProjectedCodebook, QuantizationResult, init_from_data, vq_encode

SSL_FRAME_RATE = 50


class FeatureFormatError(ValueError):
    """Malformed feature file."""


class PseudoSslExtractor:
    """Deterministic stand-in for a frozen self-supervised speech model.

    Log-mel frames at 50 Hz, stacked with their neighbours (order: current,
    previous, next; truncated to ``dim``), then standardized per dimension with
    statistics fitted once on a corpus. Holds no trainable parameters.
    """

    n_fft = 1024

    def __init__(self, dim: int, sample_rate: int = 24000):
        if sample_rate % SSL_FRAME_RATE:
            raise ValueError(f"sample rate {sample_rate} is not a multiple of {SSL_FRAME_RATE} Hz")
        self.dim = dim
        self.sample_rate = sample_rate
        self.hop = sample_rate // SSL_FRAME_RATE
        self.n_mels = math.ceil(dim / 3)
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)
        self.fitted = False

    def raw_features(self, audio: AudioBuffer) -> np.ndarray:
        if audio.sample_rate != self.sample_rate:
            raise ValueError(f"extractor expects {self.sample_rate} Hz audio, got {audio.sample_rate}")
        frames = len(audio.samples) // self.hop
        if frames < 1:
            raise ValueError(f"audio shorter than one {self.hop}-sample hop")
        mel = log_mel_features(audio, self.n_fft, self.hop, self.n_mels).values[:, :frames]
        prev = np.concatenate([mel[:, :1], mel[:, :-1]], axis=1)
        nxt = np.concatenate([mel[:, 1:], mel[:, -1:]], axis=1)
        return np.concatenate([mel, prev, nxt], axis=0)[: self.dim]

    def fit(self, corpus) -> "PseudoSslExtractor":
        feats = np.concatenate([self.raw_features(a) for a in corpus], axis=1)
        self.mean = feats.mean(axis=1)
        std = feats.std(axis=1)
        self.std = np.where(std > 1e-8, std, 1.0)
        self.fitted = True
        return self

    def __call__(self, audio: AudioBuffer) -> FeatureMap:
        raw = self.raw_features(audio)
        return FeatureMap((raw - self.mean[:, None]) / self.std[:, None], float(SSL_FRAME_RATE))


def extract_pseudo_ssl(audio: AudioBuffer, extractor: PseudoSslExtractor) -> FeatureMap:
    return extractor(audio)


class SemanticStream(Module):
    """Pool SSL features to the codec rate, encode, quantize (RVQ-1), decode."""

    def __init__(self, dim: int, codebook_size: int, code_dim: int, factor: int, n_blocks: int, rng):
        self.factor = factor
        self.encoder = ResNet(dim, n_blocks, rng)
        self.codebook = ProjectedCodebook(codebook_size, dim, code_dim, rng)
        self.decoder = ResNet(dim, n_blocks, rng)

    def pool(self, ssl: Tensor) -> Tensor:
        return avg_pool(ssl, self.factor)

    def __call__(self, ssl_50hz: Tensor, init_rng=None) -> tuple[QuantizationResult, Tensor, Tensor]:
        """(B, H, T50) -> (vq result, RVQ_1_feat (B, H, T), pooled target (B, H, T))."""
        target = self.pool(ad.stop_gradient(ssl_50hz))
        z = self.encoder(target)
        if init_rng is not None and not self.codebook.initialized:
            init_from_data(self.codebook, z.data, init_rng)
        vq = vq_encode(z, self.codebook)
        return vq, self.decoder(vq.quantized), target

    def decode_tokens(self, indices: np.ndarray) -> Tensor:
        """(B, T) RVQ-1 codes -> RVQ_1_feat, without any SSL input."""
        return self.decoder(self.codebook.decode(indices))


def semantic_encode(ssl_feat: FeatureMap, factor: int, stream: SemanticStream):
    """FeatureMap-level semantic encoding: (tokens, RVQ_1_feat, pooled target)."""
    if factor != stream.factor:
        raise ValueError(f"downsample factor {factor} does not match the stream's factor {stream.factor}")
    with ad.no_grad():
        vq, feat, target = stream(Tensor(ssl_feat.values[None]))
    rate = ssl_feat.frame_rate / factor
    return vq.indices[0], FeatureMap(feat.data[0], rate), FeatureMap(target.data[0], rate)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"DCF1"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIQ")


def store_feature_file(path: str | os.PathLike, feat: FeatureMap) -> None:
    """Write a FeatureMap as little-endian float32 behind a fixed 24-byte header."""
    values = np.asarray(feat.values)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("feature map must be (dim > 0) x frames")
    milli = int(round(feat.frame_rate * 1000))
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, values.shape[0], milli, values.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.astype("<f4").tobytes())


def load_feature_file(path: str | os.PathLike) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FEATURE_HEADER.size:
        raise FeatureFormatError(f"{path}: header needs {_FEATURE_HEADER.size} bytes, file has {len(blob)}")
    magic, version, dim, milli, frames = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at offset 4")
    if dim == 0:
        raise FeatureFormatError(f"{path}: dim is 0 at offset 8")
    expected = dim * frames * 4
    actual = len(blob) - _FEATURE_HEADER.size
    if actual != expected:
        raise FeatureFormatError(f"{path}: payload is {actual} bytes, expected {expected} ({dim} x {frames} x 4)")
    values = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(dim, frames)
    return FeatureMap(values.astype(np.float64), milli / 1000.0)
