"""Dual-stream neural audio codec at desk scale, on a small numpy autodiff engine."""

from .bitstream import bitrate_bps, deserialize, serialize, tokens_per_second
from .blocks import frame_rate
from .codec import (DualCodecConfig, DualCodecModel, LossReport, load_checkpoint, save_checkpoint, synth_corpus,
                    train_step)
from .dsp import AudioBuffer, FeatureMap, read_wav, write_wav
from .estimator import DualCodecEstimator, check_audio, check_corpus
from .metrics import MetricReport, mcd, mel_distance, measure_rtf, si_snr
from .quantizer import TokenMatrix
from .training import train

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "DualCodecConfig", "DualCodecEstimator", "DualCodecModel", "FeatureMap", "LossReport",
    "MetricReport", "TokenMatrix", "bitrate_bps", "check_audio", "check_corpus", "deserialize", "frame_rate",
    "load_checkpoint", "mcd", "measure_rtf", "mel_distance", "read_wav", "save_checkpoint", "serialize", "si_snr",
    "synth_corpus", "tokens_per_second", "train", "train_step", "write_wav",
]
