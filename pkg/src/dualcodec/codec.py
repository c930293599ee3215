"""The dual-stream codec: composition of both streams, losses, training, I/O."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import VARIANTS, EncoderConfig, Module, WaveDecoder, WaveEncoder, default_channels, normalize_variant
from .dsp import AudioBuffer, mel_scales, multiscale_mel_loss
from .optim import Adam
from .quantizer import ProjectedCodebook, TokenMatrix, init_from_data, reinit_dead_codes, rvq_forward, sample_dropout_q
from .semantic import PseudoSslExtractor, SemanticStream

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


@dataclass
class DualCodecConfig:
    variant: str = "25hz"
    n_layers: int = 8
    rvq1_size: int = 1024
    rest_size: int = 1024
    latent_dim: int = 64
    code_dim: int = 8
    sample_rate: int = 24000
    channels: Sequence[int] | None = None
    semantic_blocks: int = 2
    mel_n_ffts: Sequence[int] = (64, 128, 256, 512, 1024, 2048)
    w_mel: float = 15.0
    w_ssl: float = 1.0
    w_codebook: float = 1.0
    w_commit: float = 0.25
    learning_rate: float = 1e-4
    betas: Sequence[float] = (0.8, 0.99)
    clip_norm: float = 1e3
    reinit_every: int = 100

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.n_layers < 2:
            raise ValueError("n_layers must be >= 2 (one semantic layer plus at least one residual layer)")
        if self.rvq1_size < 2 or self.rest_size < 2:
            raise ValueError("codebook sizes must be >= 2")
        if self.channels is None:
            self.channels = default_channels(self.variant)
        self.channels = tuple(int(c) for c in self.channels)
        self.mel_n_ffts = tuple(int(n) for n in self.mel_n_ffts)
        self.betas = tuple(float(b) for b in self.betas)

    @property
    def strides(self) -> tuple[int, ...]:
        return VARIANTS[self.variant]["strides"]

    @property
    def downsample(self) -> int:
        return VARIANTS[self.variant]["downsample"]

    @property
    def hop_length(self) -> int:
        return int(np.prod(self.strides))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def layer_sizes(self) -> list[int]:
        return [self.rvq1_size] + [self.rest_size] * (self.n_layers - 1)

    @property
    def scales(self):
        return mel_scales(self.mel_n_ffts)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.sample_rate, self.variant, self.latent_dim, self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DualCodecConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    ssl_mse: float
    mel_multi_scale: float
    codebook_l1: float
    commitment: float
    total: float
    q: int = 0
    grad_norm: float = 0.0
    clipped: bool = False

    FIELDS = ("ssl_mse", "mel_multi_scale", "codebook_l1", "commitment", "total")


@dataclass
class ForwardOutput:
    recon: Tensor  # (B, 1, T)
    target_audio: np.ndarray  # (B, T) aligned to recon
    ssl_target: Tensor
    rvq1_feat: Tensor
    wave_feat: Tensor
    decoder_input: Tensor
    semantic: object
    rest: object
    total: Tensor | None = None
    parts: dict = field(default_factory=dict)


def align_frames(n_semantic: int, n_wave: int) -> int:
    if abs(n_semantic - n_wave) > 1:
        raise ValueError(f"stream frame counts differ by more than one: semantic {n_semantic}, waveform {n_wave}")
    return min(n_semantic, n_wave)


class DualCodecModel(Module):
    def __init__(self, cfg: DualCodecConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self._extractor = PseudoSslExtractor(cfg.latent_dim, cfg.sample_rate)
        self.semantic = SemanticStream(cfg.latent_dim, cfg.rvq1_size, cfg.code_dim, cfg.downsample,
                                       cfg.semantic_blocks, rng)
        self.encoder = WaveEncoder(cfg.encoder_config(), rng)
        self.rvq = [ProjectedCodebook(cfg.rest_size, cfg.latent_dim, cfg.code_dim, rng) for _ in range(cfg.n_layers - 1)]
        self.decoder = WaveDecoder(cfg.encoder_config(), rng)

    @property
    def extractor(self) -> PseudoSslExtractor:
        return self._extractor

    @property
    def codebooks(self) -> list[ProjectedCodebook]:
        return [self.semantic.codebook] + self.rvq

    # -- feature preparation -------------------------------------------------
    def ssl_features(self, batch: np.ndarray) -> np.ndarray:
        """(B, T) audio -> (B, H, T50) frozen semantic features."""
        feats = [self._extractor(AudioBuffer(x, self.cfg.sample_rate)).values for x in batch]
        n = min(f.shape[1] for f in feats)
        return np.stack([f[:, :n] for f in feats])

    # -- forward -------------------------------------------------------------
    def forward(self, batch: np.ndarray, q: int, ssl: np.ndarray | None = None, init_rng=None) -> ForwardOutput:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if not 0 <= q <= len(self.rvq):
            raise ValueError(f"q={q} outside [0, {len(self.rvq)}]")
        hop = self.cfg.hop_length
        if batch.shape[1] < hop:
            raise ValueError(f"audio of {batch.shape[1]} samples is shorter than one {hop}-sample frame")
        ssl = self.ssl_features(batch) if ssl is None else ssl
        vq1, rvq1_feat, ssl_target = self.semantic(Tensor(ssl), init_rng=init_rng)

        extra = (-batch.shape[1]) % hop
        padded = np.pad(batch, ((0, 0), (0, extra))) if extra else batch
        wave_feat = self.encoder(Tensor(padded[:, None, :]))
        n = align_frames(rvq1_feat.shape[2], wave_feat.shape[2])
        if rvq1_feat.shape[2] != n:
            rvq1_feat, ssl_target = rvq1_feat[:, :, :n], ssl_target[:, :, :n]
        if wave_feat.shape[2] != n:
            wave_feat = wave_feat[:, :, :n]

        rest = rvq_forward(wave_feat - rvq1_feat, self.rvq, q, init_rng=init_rng)
        decoder_input = rvq1_feat + rest.quantized_sum
        recon = self.decoder(decoder_input)
        target = padded[:, : n * hop]
        return ForwardOutput(recon, target, ssl_target, rvq1_feat, wave_feat, decoder_input, vq1, rest)

    def losses(self, out: ForwardOutput) -> tuple[Tensor, dict]:
        cfg = self.cfg
        recon = ad.reshape(out.recon, (out.recon.shape[0], -1))
        parts = {
            "ssl_mse": ad.mse_loss(out.rvq1_feat, out.ssl_target),
            "mel_multi_scale": multiscale_mel_loss(out.target_audio, recon, cfg.sample_rate, cfg.scales),
            "codebook_l1": out.semantic.codebook_loss + out.rest.codebook_loss,
            "commitment": out.semantic.commitment_loss + out.rest.commitment_loss,
        }
        total = (cfg.w_ssl * parts["ssl_mse"] + cfg.w_mel * parts["mel_multi_scale"]
                 + cfg.w_codebook * parts["codebook_l1"] + cfg.w_commit * parts["commitment"])
        return total, parts

    def forward_train(self, batch: np.ndarray, q: int, ssl: np.ndarray | None = None, init_rng=None):
        """Run the model and its losses. Returns (LossReport, total loss Tensor, ForwardOutput)."""
        out = self.forward(batch, q, ssl=ssl, init_rng=init_rng)
        total, parts = self.losses(out)
        values = {k: float(v.data) for k, v in parts.items()}
        cfg = self.cfg
        values["total"] = (cfg.w_ssl * values["ssl_mse"] + cfg.w_mel * values["mel_multi_scale"]
                           + cfg.w_codebook * values["codebook_l1"] + cfg.w_commit * values["commitment"])
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericError(f"non-finite loss at q={q}: {values}")
        out.total, out.parts = total, parts
        return LossReport(q=q, **values), total, out

    # -- inference -----------------------------------------------------------
    def encode(self, audio: AudioBuffer, n_layers: int | None = None) -> TokenMatrix:
        n_layers = self.cfg.n_layers if n_layers is None else n_layers
        if not 1 <= n_layers <= self.cfg.n_layers:
            raise ValueError(f"n_layers must be in [1, {self.cfg.n_layers}], got {n_layers}")
        if audio.sample_rate != self.cfg.sample_rate:
            raise ValueError(f"model expects {self.cfg.sample_rate} Hz audio, got {audio.sample_rate}")
        with ad.no_grad():
            out = self.forward(audio.samples[None], n_layers - 1)
        codes = [out.semantic.indices[0, : out.rvq1_feat.shape[2]]] + [ix[0] for ix in out.rest.indices]
        return TokenMatrix(np.stack(codes), self.cfg.layer_sizes[:n_layers], self.cfg.frame_rate)

    def decode_features(self, tokens: TokenMatrix) -> Tensor:
        if tokens.n_layers > self.cfg.n_layers:
            raise ValueError(f"{tokens.n_layers} token rows exceed the model's {self.cfg.n_layers} layers")
        if tokens.layer_sizes != self.cfg.layer_sizes[: tokens.n_layers]:
            raise ValueError(f"token layer sizes {tokens.layer_sizes} do not match the model's "
                             f"{self.cfg.layer_sizes[: tokens.n_layers]}")
        if not math.isclose(tokens.frame_rate, self.cfg.frame_rate):
            raise ValueError(f"token frame rate {tokens.frame_rate} Hz does not match the model's "
                             f"{self.cfg.frame_rate} Hz ({self.cfg.variant})")
        for layer, k in enumerate(tokens.layer_sizes):
            bad = np.flatnonzero((tokens.codes[layer] < 0) | (tokens.codes[layer] >= k))
            if len(bad):
                raise ValueError(f"code out of range at layer {layer}, frame {bad[0]}")
        with ad.no_grad():
            feat = self.semantic.decode_tokens(tokens.codes[:1])
            for layer in range(1, tokens.n_layers):
                feat = feat + self.rvq[layer - 1].decode(tokens.codes[layer : layer + 1])
        return feat

    def decode(self, tokens: TokenMatrix) -> AudioBuffer:
        feat = self.decode_features(tokens)
        with ad.no_grad():
            y = self.decoder(feat)
        return AudioBuffer(y.data[0, 0], self.cfg.sample_rate)

    # -- training ------------------------------------------------------------
    def make_optimizer(self, lr: float | None = None) -> Adam:
        lr = self.cfg.learning_rate if lr is None else lr
        return Adam(self.parameters(), lr=lr, betas=self.cfg.betas, clip_norm=self.cfg.clip_norm)


def train_step(batch, model: DualCodecModel, optimizer: Adam, rng: np.random.Generator, step: int = 0) -> LossReport:
    """One optimization step with RVQ dropout; returns the pre-update losses."""
    batch = np.stack([b.samples if isinstance(b, AudioBuffer) else np.asarray(b, dtype=np.float64) for b in batch])
    q = sample_dropout_q(rng, len(model.rvq))
    optimizer.zero_grad()
    report, total, out = model.forward_train(batch, q, init_rng=rng)
    total.backward()
    report.grad_norm, report.clipped = optimizer.step()
    if report.clipped:
        log.info("step %d: gradient norm %.3g clipped to %.3g", step, report.grad_norm, optimizer.clip_norm)

    active = [(model.semantic.codebook, out.semantic)] + list(zip(model.rvq, out.rest.results))
    for cb, res in active:
        cb.usage += np.bincount(res.indices.reshape(-1), minlength=cb.size)
    every = model.cfg.reinit_every
    if every and (step + 1) % every == 0:
        for cb, res in active:
            rows = res.projections.transpose(0, 2, 1).reshape(-1, cb.code_dim)
            n = reinit_dead_codes(cb, cb.usage, rows, rng)
            if n:
                log.debug("step %d: reinitialized %d dead codes", step, n)
        for cb in model.codebooks:
            cb.usage[:] = 0
    return report


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def synth_utterance(rng: np.random.Generator, duration: float, sample_rate: int = 24000) -> tuple[AudioBuffer, np.ndarray]:
    """One harmonic tone complex. Returns the buffer and its harmonic frequencies."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(80.0, 400.0)
    n_harm = int(rng.integers(2, 6))
    freqs = f0 * np.arange(1, n_harm + 1)
    amps = rng.uniform(0.3, 1.0, n_harm) / np.arange(1, n_harm + 1)
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    tone = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    rate = rng.uniform(2.0, 6.0)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    fade = np.minimum(1.0, np.minimum(t, duration - t) / 0.02)
    x = tone * env * fade
    rms = np.sqrt(np.mean(x * x)) + 1e-12
    x = x + rng.normal(scale=rms * 10 ** (-30 / 20), size=n)
    x *= 0.7 / np.max(np.abs(x))
    return AudioBuffer(x, sample_rate), freqs


def synth_corpus(rng, n_utts: int, duration: float, sample_rate: int = 24000) -> list[AudioBuffer]:
    """Deterministic corpus of harmonic utterances, peak-normalized to 0.7."""
    if duration < 0.5:
        raise ValueError("duration must be at least 0.5 s")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return [synth_utterance(rng, duration, sample_rate)[0] for _ in range(n_utts)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DCM1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def _state_blobs(model: DualCodecModel) -> list[tuple[str, np.ndarray]]:
    blobs = [(name, p.data) for name, p in model.named_parameters()]
    blobs.append(("extractor.mean", model.extractor.mean))
    blobs.append(("extractor.std", model.extractor.std))
    for i, cb in enumerate(model.codebooks):
        blobs.append((f"codebook{i}.usage", cb.usage.astype(np.float64)))
    return blobs


def checkpoint_bytes(model: DualCodecModel) -> bytes:
    meta = {
        "config": model.cfg.to_dict(),
        "extractor_fitted": model.extractor.fitted,
        "initialized": [cb.initialized for cb in model.codebooks],
    }
    cfg_blob = json.dumps(meta, sort_keys=True).encode()
    blobs = _state_blobs(model)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, model: DualCodecModel) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(model))
    os.replace(tmp, path)


def checkpoint_from_bytes(blob: bytes) -> DualCodecModel:
    def need(offset: int, n: int, what: str) -> None:
        if offset + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {offset}, "
                                  f"{len(blob) - offset} left")

    need(0, 12, "header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r} at offset 0")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    need(12, cfg_len + 4, "config block")
    try:
        meta = json.loads(blob[12 : 12 + cfg_len])
        model = DualCodecModel(DualCodecConfig.from_dict(meta["config"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad config block at offset 12: {exc}") from exc
    expected = dict(_state_blobs(model))
    pos = 12 + cfg_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    loaded = {}
    for _ in range(count):
        need(pos, 2, "name length")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        need(pos + 2, nlen + 1, "name")
        name = blob[pos + 2 : pos + 2 + nlen].decode()
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        need(pos + 1, 4 * ndim, f"shape of {name}")
        shape = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
        pos += 1 + 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(pos, nbytes, f"data of {name}")
        loaded[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes at offset {pos}")
    if set(loaded) != set(expected):
        raise CheckpointError(f"checkpoint tensors do not match the config: missing {sorted(set(expected) - set(loaded))}, "
                              f"unexpected {sorted(set(loaded) - set(expected))}")
    for name, p in model.named_parameters():
        if loaded[name].shape != p.shape:
            raise CheckpointError(f"{name}: shape {loaded[name].shape} != {p.shape}")
        p.data = loaded[name].astype(np.float64).copy()
    model.extractor.mean = loaded["extractor.mean"].copy()
    model.extractor.std = loaded["extractor.std"].copy()
    model.extractor.fitted = bool(meta["extractor_fitted"])
    for i, cb in enumerate(model.codebooks):
        cb.usage = loaded[f"codebook{i}.usage"].astype(np.int64)
        cb.initialized = bool(meta["initialized"][i])
    return model


def load_checkpoint(path: str | os.PathLike) -> DualCodecModel:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
