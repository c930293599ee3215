"""Objective reconstruction metrics and real-time-factor timing."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.fft import dct
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .dsp import LOG_FLOOR, AudioBuffer, log_mel, mel_filterbank, multiscale_mel_loss, stft_magnitude

MCD_N_FFT = 1024
MCD_HOP = 240
MCD_N_MELS = 23
MCD_N_CEPS = 13
MCD_SCALE = 10.0 / math.log(10.0) * math.sqrt(2.0)
SI_SNR_CAP = 100.0


def _pair(ref: AudioBuffer, deg: AudioBuffer, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    if ref.sample_rate != deg.sample_rate:
        raise ValueError(f"sample rates differ: {ref.sample_rate} vs {deg.sample_rate}")
    n = min(len(ref), len(deg))
    if n < min_len:
        raise ValueError(f"signals of {n} samples are shorter than one {min_len}-sample analysis frame")
    return ref.samples[:n], deg.samples[:n]


def mel_cepstrum(x: np.ndarray, sample_rate: int, n_ceps: int = MCD_N_CEPS) -> np.ndarray:
    """(frames, n_ceps + 1) mel-cepstra including c0."""
    fb = mel_filterbank(MCD_N_FFT, MCD_N_MELS, sample_rate)
    with ad.no_grad():
        mel = log_mel(stft_magnitude(x, MCD_N_FFT, MCD_HOP), fb, LOG_FLOOR).data
    return dct(mel.T, type=2, norm="ortho", axis=1)[:, : n_ceps + 1]


def mcd_from_cepstra(ref_ceps: np.ndarray, deg_ceps: np.ndarray) -> float:
    """Frame-aligned MCD in dB; column 0 (energy) is ignored."""
    n = min(len(ref_ceps), len(deg_ceps))
    diff = ref_ceps[:n, 1:] - deg_ceps[:n, 1:]
    return float(MCD_SCALE * np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def mcd(ref: AudioBuffer, deg: AudioBuffer) -> float:
    r, d = _pair(ref, deg, MCD_N_FFT)
    return mcd_from_cepstra(mel_cepstrum(r, ref.sample_rate), mel_cepstrum(d, ref.sample_rate))


def mel_distance(ref: AudioBuffer, deg: AudioBuffer, scales=None) -> float:
    """The training multi-scale mel loss, unweighted, on the truncated pair."""
    r, d = _pair(ref, deg, MCD_N_FFT)
    with ad.no_grad():
        return float(multiscale_mel_loss(r, d, ref.sample_rate, scales).data)


def si_snr(ref: AudioBuffer, deg: AudioBuffer) -> float:
    """Scale-invariant SNR in dB, clipped to [-100, 100]."""
    n = min(len(ref), len(deg))
    r = ref.samples[:n] - ref.samples[:n].mean()
    d = deg.samples[:n] - deg.samples[:n].mean()
    energy = float(r @ r)
    if n == 0 or energy == 0.0:
        raise ValueError("reference has zero energy after mean removal")
    target = (d @ r) / energy * r
    noise = d - target
    num, den = float(target @ target), float(noise @ noise)
    if num <= den * 10 ** (-SI_SNR_CAP / 10):  # includes a silent deg
        return -SI_SNR_CAP
    if den <= num * 10 ** (-SI_SNR_CAP / 10):
        return SI_SNR_CAP
    return 10.0 * math.log10(num / den)


def measure_rtf(fn: Callable[[AudioBuffer], object], corpus: Sequence[AudioBuffer],
                clock: Callable[[], float] = time.perf_counter) -> float:
    """Total processing time over total audio duration, one item at a time."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    elapsed = 0.0
    with threadpool_limits(limits=1):
        for audio in corpus:
            start = clock()
            fn(audio)
            elapsed += clock() - start
    return elapsed / sum(a.duration for a in corpus)


@dataclass
class MetricReport:
    mcd: float
    mel_distance: float
    si_snr: float
    rtf_encode: float
    rtf_decode: float
    n_files: int
    n_layers: int = 0
    per_file: list = field(default_factory=list)

    KEYS = ("n_files", "n_layers", "mcd", "mel_distance", "si_snr", "rtf_encode", "rtf_decode")

    def __post_init__(self):
        if self.n_files < 1:
            raise ValueError("a report needs at least one file")
        for key in ("mcd", "mel_distance", "si_snr", "rtf_encode", "rtf_decode"):
            v = getattr(self, key)
            if not math.isfinite(v):
                raise ValueError(f"{key} is not finite: {v}")
        if self.rtf_encode < 0 or self.rtf_decode < 0:
            raise ValueError("rtf must be nonnegative")

    def to_text(self) -> str:
        lines = []
        for k in self.KEYS:
            v = getattr(self, k)
            lines.append(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        ordered = {k: d[k] for k in self.KEYS}
        ordered["per_file"] = d["per_file"]
        return json.dumps(ordered, indent=2)


def evaluate(model, corpus: Sequence[AudioBuffer], n_layers: int | None = None, timing: bool = True) -> MetricReport:
    """Encode/decode every file, score against the input and time both directions."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    n_layers = model.cfg.n_layers if n_layers is None else n_layers
    rows = []
    for i, audio in enumerate(corpus):
        out = model.decode(model.encode(audio, n_layers))
        rows.append({"index": i, "mcd": mcd(audio, out), "mel_distance": mel_distance(audio, out),
                     "si_snr": si_snr(audio, out)})
    if timing:
        tokens = [model.encode(a, n_layers) for a in corpus]
        rtf_enc = measure_rtf(lambda a: model.encode(a, n_layers), corpus)
        lookup = {id(a): t for a, t in zip(corpus, tokens)}
        rtf_dec = measure_rtf(lambda a: model.decode(lookup[id(a)]), corpus)
    else:
        rtf_enc = rtf_dec = 0.0
    mean = lambda key: float(np.mean([r[key] for r in rows]))  # noqa: E731
    return MetricReport(mean("mcd"), mean("mel_distance"), mean("si_snr"), rtf_enc, rtf_dec,
                        len(corpus), n_layers, rows)


def identity_report(corpus: Iterable[AudioBuffer]) -> MetricReport:
    """Scores of each file against itself; a sanity fixture for the eval path."""
    corpus = list(corpus)
    rows = [{"index": i, "mcd": mcd(a, a), "mel_distance": mel_distance(a, a), "si_snr": si_snr(a, a)}
            for i, a in enumerate(corpus)]
    mean = lambda key: float(np.mean([r[key] for r in rows]))  # noqa: E731
    return MetricReport(mean("mcd"), mean("mel_distance"), mean("si_snr"), 0.0, 0.0, len(corpus), 0, rows)
