"""Convolutional building blocks for both codec streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = {
    "25hz": {"strides": (4, 5, 6, 8), "downsample": 2},
    "12.5hz": {"strides": (4, 5, 6, 8, 2), "downsample": 4},
}


def normalize_variant(variant: str) -> str:
    key = str(variant).lower().replace(" ", "")
    if key in ("25", "25.0"):
        key = "25hz"
    if key in ("12.5", "12hz"):
        key = "12.5hz"
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return key


class Module:
    """Parameter container. Attributes that are Tensors with requires_grad,
    Modules, or lists of Modules are discovered by ``named_parameters``."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------

def snake(x: Tensor, alpha: float = 1.0) -> Tensor:
    """x + sin(alpha x)^2 / alpha."""
    if alpha <= 0:
        raise ValueError(f"snake alpha must be positive, got {alpha}")
    x = ad.as_tensor(x)
    s = np.sin(alpha * x.data)
    out = x.data + s * s / alpha
    return ad._make(out, (x,), lambda g: ad._accumulate(x, g * (1.0 + np.sin(2 * alpha * x.data))))


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean over the last axis (kernel = stride = factor); the tail is dropped."""
    if factor <= 0:
        raise ValueError(f"pooling factor must be positive, got {factor}")
    x = ad.as_tensor(x)
    frames = x.shape[-1] // factor
    if frames == 0:
        raise ValueError(f"need at least {factor} frames, got {x.shape[-1]}")
    trimmed = x[..., : frames * factor] if frames * factor != x.shape[-1] else x
    return ad.mean(ad.reshape(trimmed, x.shape[:-1] + (frames, factor)), axis=-1)


def avg_pool_downsample(feat, factor: int):
    """FeatureMap-level pooling; the output frame rate is divided by ``factor``."""
    from .dsp import FeatureMap

    if factor <= 0:
        raise ValueError(f"pooling factor must be positive, got {factor}")
    with ad.no_grad():
        pooled = avg_pool(Tensor(feat.values), factor)
    return FeatureMap(pooled.data, feat.frame_rate / factor)


def frame_rate(sample_rate: float, strides: Sequence[int]) -> float:
    if len(strides) == 0:
        raise ValueError("strides must be nonempty")
    if any(int(s) < 1 for s in strides):
        raise ValueError(f"strides must all be >= 1, got {tuple(strides)}")
    hop = int(np.prod([int(s) for s in strides]))
    return float(Fraction(sample_rate).limit_denominator(10**6) / hop)


def layer_norm_channels(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across the channel axis (1) independently at every frame."""
    mu = ad.mean(x, axis=1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=1, keepdims=True)
    y = xc / ad.sqrt(var + eps)
    return y * ad.reshape(gain, (1, -1, 1)) + ad.reshape(bias, (1, -1, 1))


def pointwise(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution as a broadcast matmul: w (C_out, C_in) @ x (B, C_in, T)."""
    out = ad.matmul(w, x)
    return out if b is None else out + ad.reshape(b, (1, -1, 1))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng, stride: int = 1, dilation: int = 1,
                 padding: tuple[int, int] | None = None):
        self.weight = _uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel)
        self.bias = _uniform(rng, (out_ch,), in_ch * kernel)
        self.stride = stride
        self.dilation = dilation
        if padding is None:
            total = (kernel - 1) * dilation + 1 - stride
            padding = (total // 2, total - total // 2)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, dilation=self.dilation)

    def output_length(self, n: int) -> int:
        span = (self.weight.shape[2] - 1) * self.dilation + 1
        return (n + sum(self.padding) - span) // self.stride + 1


class ConvTranspose1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng, stride: int = 1):
        self.weight = _uniform(rng, (in_ch, out_ch, kernel), in_ch * kernel)
        self.bias = _uniform(rng, (out_ch,), in_ch * kernel)
        self.stride = stride
        total = kernel - stride
        self.crop = (total // 2, total - total // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose1d(x, self.weight, self.bias, stride=self.stride, crop=self.crop)

    def output_length(self, n: int) -> int:
        return (n - 1) * self.stride + self.weight.shape[2] - sum(self.crop)


class ConvNeXtBlock(Module):
    """Depthwise conv (k=7) -> channel LayerNorm -> 4x pointwise expansion -> GELU
    -> pointwise contraction, added back onto the input."""

    def __init__(self, dim: int, rng, kernel: int = 7, expansion: int = 4):
        self.dw_weight = _uniform(rng, (dim, kernel), kernel)
        self.dw_bias = _uniform(rng, (dim,), kernel)
        self.norm_gain = Tensor(np.ones(dim), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.pw1_weight = _uniform(rng, (expansion * dim, dim), dim)
        self.pw1_bias = _uniform(rng, (expansion * dim,), dim)
        self.pw2_weight = _uniform(rng, (dim, expansion * dim), expansion * dim)
        self.pw2_bias = _uniform(rng, (dim,), expansion * dim)
        self.dim = dim
        self.kernel = kernel

    def zero_branch(self) -> None:
        """Zero the last projection so the block is an exact identity."""
        self.pw2_weight.data[...] = 0.0
        self.pw2_bias.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.dim:
            raise ValueError(f"ConvNeXtBlock of width {self.dim} got input of shape {x.shape}")
        h = ad.depthwise_conv1d(x, self.dw_weight, self.dw_bias, padding=self.kernel // 2)
        h = layer_norm_channels(h, self.norm_gain, self.norm_bias)
        h = ad.gelu(pointwise(h, self.pw1_weight, self.pw1_bias))
        h = pointwise(h, self.pw2_weight, self.pw2_bias)
        return x + h


class ResNet(Module):
    """A stack of ConvNeXt blocks with no resampling."""

    def __init__(self, dim: int, n_blocks: int, rng):
        self.blocks = [ConvNeXtBlock(dim, rng) for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def convnext_forward(feat, block: ConvNeXtBlock):
    """FeatureMap-level application of one ConvNeXt block."""
    from .dsp import FeatureMap

    with ad.no_grad():
        out = block(Tensor(feat.values[None]))
    return FeatureMap(out.data[0], feat.frame_rate)


class ResidualUnit(Module):
    """snake -> dilated conv k7 -> snake -> conv k1, plus skip."""

    def __init__(self, dim: int, dilation: int, rng):
        self.conv1 = Conv1d(dim, dim, 7, rng, dilation=dilation)
        self.conv2 = Conv1d(dim, dim, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(snake(self.conv1(snake(x))))


@dataclass
class EncoderConfig:
    sample_rate: int = 24000
    variant: str = "25hz"
    latent_dim: int = 64
    channels: Sequence[int] = field(default_factory=lambda: (8, 16, 32, 64, 128))
    dilations: Sequence[int] = (1,)

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        self.channels = tuple(int(c) for c in self.channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.channels) != len(self.strides) + 1:
            raise ValueError(f"need {len(self.strides) + 1} channel widths for strides {self.strides}, "
                             f"got {len(self.channels)}")

    @property
    def strides(self) -> tuple[int, ...]:
        return VARIANTS[self.variant]["strides"]

    @property
    def hop_length(self) -> int:
        return int(np.prod(self.strides))

    @property
    def frame_rate(self) -> float:
        return frame_rate(self.sample_rate, self.strides)


def default_channels(variant: str, base: int = 8) -> tuple[int, ...]:
    n = len(VARIANTS[normalize_variant(variant)]["strides"])
    return tuple(min(base * 2**i, 128) for i in range(n + 1))


class WaveEncoder(Module):
    """Waveform (B, 1, T) -> latent (B, H, T / prod(strides))."""

    def __init__(self, cfg: EncoderConfig, rng):
        ch = cfg.channels
        self.cfg = cfg
        self.stem = Conv1d(1, ch[0], 7, rng)
        self.units = []
        self.downs = []
        for i, s in enumerate(cfg.strides):
            self.units.append([ResidualUnit(ch[i], d, rng) for d in cfg.dilations])
            self.downs.append(Conv1d(ch[i], ch[i + 1], 2 * s, rng, stride=s))
        self.head = Conv1d(ch[-1], cfg.latent_dim, 3, rng)

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for i, (units, down) in enumerate(zip(self.units, self.downs)):
            for j, u in enumerate(units):
                yield from u.named_parameters(f"{prefix}block{i}.unit{j}.")
            yield from down.named_parameters(f"{prefix}block{i}.down.")
        yield from self.head.named_parameters(prefix + "head.")

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for units, down in zip(self.units, self.downs):
            for u in units:
                h = u(h)
            h = down(snake(h))
        return self.head(snake(h))


class WaveDecoder(Module):
    """Latent (B, H, F) -> waveform (B, 1, F * prod(strides)) in [-1, 1]."""

    def __init__(self, cfg: EncoderConfig, rng):
        ch = tuple(reversed(cfg.channels))
        self.cfg = cfg
        self.stem = Conv1d(cfg.latent_dim, ch[0], 7, rng)
        self.ups = []
        self.units = []
        for i, s in enumerate(reversed(cfg.strides)):
            self.ups.append(ConvTranspose1d(ch[i], ch[i + 1], 2 * s, rng, stride=s))
            self.units.append([ResidualUnit(ch[i + 1], d, rng) for d in cfg.dilations])
        self.head = Conv1d(ch[-1], 1, 7, rng)

    def named_parameters(self, prefix: str = ""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for i, (up, units) in enumerate(zip(self.ups, self.units)):
            yield from up.named_parameters(f"{prefix}block{i}.up.")
            for j, u in enumerate(units):
                yield from u.named_parameters(f"{prefix}block{i}.unit{j}.")
        yield from self.head.named_parameters(prefix + "head.")

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"decoder expects {self.cfg.latent_dim} channels, got shape {z.shape}")
        h = self.stem(z)
        for up, units in zip(self.ups, self.units):
            h = up(snake(h))
            for u in units:
                h = u(h)
        return ad.tanh(self.head(snake(h)))


def pad_to_multiple(samples: np.ndarray, hop: int) -> np.ndarray:
    """Right-pad the last axis with zeros to a multiple of ``hop``."""
    extra = (-samples.shape[-1]) % hop
    if not extra:
        return samples
    width = [(0, 0)] * (samples.ndim - 1) + [(0, extra)]
    return np.pad(samples, width)


def encoder_forward(audio, cfg: EncoderConfig, encoder: WaveEncoder):
    """AudioBuffer -> FeatureMap at the codec frame rate (inference helper)."""
    from .dsp import FeatureMap

    if len(audio.samples) == 0:
        raise ValueError("empty audio")
    x = pad_to_multiple(audio.samples, cfg.hop_length)
    with ad.no_grad():
        z = encoder(Tensor(x[None, None]))
    return FeatureMap(z.data[0], cfg.frame_rate)


def decoder_forward(feat, cfg: EncoderConfig, decoder: WaveDecoder):
    """FeatureMap -> AudioBuffer (inference helper)."""
    from .dsp import AudioBuffer

    if not np.isclose(feat.frame_rate, cfg.frame_rate):
        raise ValueError(f"feature frame rate {feat.frame_rate} Hz does not match the {cfg.variant} decoder")
    with ad.no_grad():
        y = decoder(Tensor(feat.values[None]))
    return AudioBuffer(y.data[0, 0], cfg.sample_rate)
