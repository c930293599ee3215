"""Audio buffers, 16-bit PCM WAV I/O and differentiable spectral transforms."""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_SAMPLE_RATE = 24000
LOG_FLOOR = 1e-5


class AudioFormatError(ValueError):
    """Unsupported or malformed audio file."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer is mono; samples must be 1-D")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FeatureMap:
    """A (channels x frames) latent sequence tagged with its frame rate in Hz."""

    values: np.ndarray
    frame_rate: float

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def write_wav(path: str | os.PathLike, audio: AudioBuffer) -> None:
    """Write 16-bit PCM mono. Samples are clamped to [-1, 1]; 1.0 maps to 32767."""
    clipped = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(audio.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | os.PathLike) -> AudioBuffer:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file (truncated or bad header)")
    try:
        with wave.open(path, "rb") as fh:
            channels, width, rate, n = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if len(raw) != 2 * n:
        raise AudioFormatError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioBuffer(pcm / 32768.0, rate)


# ---------------------------------------------------------------------------
# mel filterbank
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    matrix: np.ndarray
    n_fft: int
    n_mels: int
    sample_rate: int
    f_min: float
    f_max: float


@lru_cache(maxsize=64)
def _mel_matrix(n_fft: int, n_mels: int, sample_rate: int, f_min: float, f_max: float) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # narrow low-frequency triangles can fall between bins; give those the nearest bin
    for row in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[row, np.argmin(np.abs(freqs - edges[row + 1]))] = 1.0
    fb.setflags(write=False)
    return fb


def mel_filterbank(
    n_fft: int, n_mels: int, sample_rate: int = DEFAULT_SAMPLE_RATE, f_min: float = 0.0, f_max: float | None = None
) -> MelFilterbank:
    """Triangular HTK-mel filterbank of shape (n_mels, n_fft // 2 + 1)."""
    f_max = sample_rate / 2 if f_max is None else f_max
    if n_mels < 1 or not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"invalid filterbank: n_mels={n_mels}, f_min={f_min}, f_max={f_max}")
    return MelFilterbank(_mel_matrix(n_fft, n_mels, sample_rate, float(f_min), float(f_max)),
                         n_fft, n_mels, sample_rate, float(f_min), float(f_max))


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def hann_window(n_fft: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)  # periodic
    w.setflags(write=False)
    return w


def _check_fft(n_fft: int, hop: int) -> None:
    if n_fft < 32 or n_fft > 4096 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two in [32, 4096], got {n_fft}")
    if hop <= 0 or hop > n_fft:
        raise ValueError(f"hop must be in (0, n_fft], got {hop}")


def stft_magnitude(x, n_fft: int, hop: int) -> Tensor:
    """Magnitude STFT with a Hann window and reflection center padding.

    ``x`` is a Tensor (or array) of shape (T,) or (B, T). Returns (B, bins,
    frames) or (bins, frames) magnitudes; frames = (T + 2*(n_fft//2) - n_fft)//hop + 1.
    """
    _check_fft(n_fft, hop)
    x = ad.as_tensor(x)
    squeeze = x.ndim == 1
    if x.shape[-1] == 0:
        raise ValueError("empty audio")
    sig = ad.reshape(x, (-1, x.shape[-1]))
    pad = n_fft // 2
    mode = "reflect" if x.shape[-1] > pad else "constant"
    sig = ad.pad_last(sig, pad, pad, mode=mode)
    framed = ad.frames(sig, n_fft, hop) * Tensor(hann_window(n_fft))
    re, im = ad.rfft_parts(framed)
    mag = ad.transpose(ad.magnitude(re, im), (0, 2, 1))  # (B, bins, frames)
    return ad.reshape(mag, mag.shape[1:]) if squeeze else mag


def log_mel(spec: Tensor, fb: MelFilterbank, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(fb @ magnitudes, floor)) over (..., bins, frames) magnitudes."""
    spec = ad.as_tensor(spec)
    if floor <= 0:
        raise ValueError("floor must be positive")
    if spec.shape[-2] != fb.matrix.shape[1]:
        raise ValueError(f"spectrogram has {spec.shape[-2]} bins, filterbank expects {fb.matrix.shape[1]}")
    return ad.log(ad.clamp_min(ad.matmul(Tensor(fb.matrix), spec), floor))


def log_mel_features(audio: AudioBuffer, n_fft: int, hop: int, n_mels: int, floor: float = LOG_FLOOR) -> FeatureMap:
    """Non-differentiable convenience wrapper returning a FeatureMap."""
    with ad.no_grad():
        mag = stft_magnitude(audio.samples, n_fft, hop)
        mel = log_mel(mag, mel_filterbank(n_fft, n_mels, audio.sample_rate), floor)
    return FeatureMap(mel.data, audio.sample_rate / hop)


def mel_scales(n_ffts=(64, 128, 256, 512, 1024, 2048)) -> list[tuple[int, int, int]]:
    """(n_fft, hop, n_mels) triples for the multi-scale mel loss."""
    return [(n, n // 4, int(round(5 * np.log2(n / 64))) + 10) for n in n_ffts]


def multiscale_mel_loss(ref, est, sample_rate: int = DEFAULT_SAMPLE_RATE, scales=None, floor: float = LOG_FLOOR) -> Tensor:
    """Sum over scales of the mean absolute log-mel difference."""
    scales = mel_scales() if scales is None else scales
    total = None
    for n_fft, hop, n_mels in scales:
        fb = mel_filterbank(n_fft, n_mels, sample_rate)
        with ad.no_grad():
            target = log_mel(stft_magnitude(ad.stop_gradient(ad.as_tensor(ref)), n_fft, hop), fb, floor)
        pred = log_mel(stft_magnitude(est, n_fft, hop), fb, floor)
        term = ad.l1_loss(pred, target)
        total = term if total is None else total + term
    return total
