"""Projected, l2-normalized vector quantization and residual VQ."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Module, _uniform


class ProjectedCodebook(Module):
    """Input projection (D x H), K codewords in R^D, output projection (H x D).

    Nearest-codeword search runs on l2-normalized vectors; the decoded value is
    ``W_out @ e_k`` with the raw codeword.
    """

    def __init__(self, size: int, latent_dim: int, code_dim: int = 8, rng=None):
        if size < 2:
            raise ValueError(f"codebook size must be >= 2, got {size}")
        if code_dim > latent_dim:
            raise ValueError(f"code dim {code_dim} exceeds latent dim {latent_dim}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.w_in = _uniform(rng, (code_dim, latent_dim), latent_dim)
        self.w_out = _uniform(rng, (latent_dim, code_dim), code_dim)
        # start as a left inverse, so W_out W_in projects onto the code subspace and
        # subtracting a quantized layer shrinks the residual from the first step
        self.w_out.data = np.linalg.pinv(self.w_in.data)
        self.codewords = Tensor(rng.normal(size=(size, code_dim)), requires_grad=True)
        self.initialized = False
        self.usage = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def code_dim(self) -> int:
        return self.codewords.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.w_in.shape[1]

    @property
    def bits_per_token(self) -> int:
        return math.ceil(math.log2(self.size))

    def project(self, z: Tensor) -> Tensor:
        """(B, H, T) -> (B, D, T)."""
        return ad.matmul(self.w_in, z)

    def lookup(self, indices: np.ndarray) -> Tensor:
        """Raw codewords for (B, T) indices, as (B, D, T); differentiable w.r.t. the table."""
        return ad.transpose(ad.take_rows(self.codewords, indices), (0, 2, 1))

    def decode(self, indices: np.ndarray) -> Tensor:
        """(B, T) indices -> (B, H, T) output-projected codewords."""
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise ValueError(f"code out of range [0, {self.size})")
        return ad.matmul(self.w_out, self.lookup(indices))


def _l2n(v: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0), np.squeeze(norm, axis)


def nearest_codes(proj: np.ndarray, codewords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """argmin_k || l2(proj) - l2(e_k) || for proj of shape (N, D).

    Ties go to the lowest index. Rows with zero norm fall back to the raw
    (un-normalized) distance and are reported in the returned mask.
    """
    proj = np.asarray(proj, dtype=np.float64)
    cn, _ = _l2n(codewords)
    pn, norms = _l2n(proj)
    # ||a - b||^2 = |a|^2 + |b|^2 - 2 a.b ; |a|^2 is constant per row
    d = (cn * cn).sum(1)[None, :] - 2.0 * pn @ cn.T
    zero = norms == 0
    if zero.any():
        raw = (codewords * codewords).sum(1)[None, :] - 2.0 * proj[zero] @ codewords.T
        d[zero] = raw
    return np.argmin(d, axis=1), zero


@dataclass
class TokenMatrix:
    """Integer codes of shape (layers, frames). Row 0 is the semantic RVQ-1 layer."""

    codes: np.ndarray
    layer_sizes: list[int]
    frame_rate: float

    def __post_init__(self):
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=np.int64))
        self.layer_sizes = [int(k) for k in self.layer_sizes]
        if self.codes.shape[0] != len(self.layer_sizes):
            raise ValueError(f"{self.codes.shape[0]} code rows but {len(self.layer_sizes)} layer sizes")
        for layer, k in enumerate(self.layer_sizes):
            row = self.codes[layer]
            bad = np.flatnonzero((row < 0) | (row >= k))
            if len(bad):
                raise ValueError(f"code {row[bad[0]]} out of range [0, {k}) at layer {layer}, frame {bad[0]}")

    @property
    def n_layers(self) -> int:
        return self.codes.shape[0]

    @property
    def frames(self) -> int:
        return self.codes.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenMatrix) and self.layer_sizes == other.layer_sizes
                and self.frame_rate == other.frame_rate and np.array_equal(self.codes, other.codes))


@dataclass
class QuantizationResult:
    indices: np.ndarray  # (B, T)
    quantized: Tensor  # (B, H, T), forward value W_out e_k, straight-through to the input
    residual: Tensor  # (B, H, T) input - quantized
    codebook_loss: Tensor
    commitment_loss: Tensor
    zero_norm_frames: int = 0
    projections: np.ndarray | None = None  # (B, D, T) projected inputs


class FrozenQuantization:
    """Discrete choices recorded on one forward pass and replayed on later ones.

    While replaying, every quantizer reuses its recorded indices, emits
    ``proj + (code - proj)_recorded`` and treats its stop-gradient operands as
    the recorded constants. The network is then a smooth function whose exact
    gradient is the straight-through gradient, which is what a
    finite-difference check needs.
    """

    def __init__(self):
        self.records: list[tuple[np.ndarray, np.ndarray]] = []
        self.replaying = False
        self.cursor = 0


_frozen: FrozenQuantization | None = None


@contextmanager
def freeze_quantization(state: FrozenQuantization):
    """Record on the first use of ``state``, replay on every later one."""
    global _frozen
    prev = _frozen
    state.replaying = bool(state.records)
    state.cursor = 0
    _frozen = state
    try:
        yield state
    finally:
        _frozen = prev


def vq_encode(z: Tensor, cb: ProjectedCodebook, straight_through: bool = True) -> QuantizationResult:
    """Quantize a (B, H, T) latent with one projected codebook."""
    z = ad.as_tensor(z)
    if z.ndim == 2:
        z = ad.reshape(z, (1,) + z.shape)
    if z.shape[1] != cb.latent_dim:
        raise ValueError(f"input has {z.shape[1]} channels, codebook expects {cb.latent_dim}")
    proj = cb.project(z)  # (B, D, T)
    b, d, t = proj.shape
    replay = _frozen is not None and _frozen.replaying
    if replay:
        indices, proj_sg, code_sg = _frozen.records[_frozen.cursor]
        _frozen.cursor += 1
        zero = np.zeros(0, dtype=bool)
    else:
        flat = proj.data.transpose(0, 2, 1).reshape(-1, d)
        idx, zero = nearest_codes(flat, cb.codewords.data)
        indices = idx.reshape(b, t)
    code = cb.lookup(indices)  # (B, D, T), carries the codebook gradient
    if not replay:
        proj_sg, code_sg = ad.stop_gradient(proj), ad.stop_gradient(code)
        if _frozen is not None:
            _frozen.records.append((indices, proj_sg, code_sg))
    codebook_loss = ad.l1_loss(proj_sg, code)
    commitment_loss = ad.mse_loss(proj, code_sg)
    if replay:
        code_st = proj + Tensor(code_sg.data - proj_sg.data)
    else:
        code_st = ad.straight_through(proj, code) if straight_through else code_sg
    quantized = ad.matmul(cb.w_out, code_st)
    return QuantizationResult(indices, quantized, z - quantized, codebook_loss, commitment_loss, int(zero.sum()),
                              proj.data)


def quantization_loss(result: QuantizationResult, beta: float = 0.25) -> Tensor:
    """Codebook L1 term plus beta times the squared-error commitment term."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return result.codebook_loss + beta * result.commitment_loss


def ste_passthrough(inp: Tensor, quantized: Tensor) -> Tensor:
    return ad.straight_through(inp, quantized)


@dataclass
class RVQOutput:
    indices: list[np.ndarray]  # one (B, T) array per active layer
    quantized_sum: Tensor
    residual: Tensor
    results: list[QuantizationResult] = field(default_factory=list)

    @property
    def codebook_loss(self) -> Tensor | float:
        return sum((r.codebook_loss for r in self.results), 0.0)

    @property
    def commitment_loss(self) -> Tensor | float:
        return sum((r.commitment_loss for r in self.results), 0.0)


def rvq_forward(x: Tensor, layers: list[ProjectedCodebook], q: int, init_rng=None) -> RVQOutput:
    """Greedy residual quantization through the first ``q`` layers.

    If ``init_rng`` is given, layers that have not been initialized take their
    codewords from the projected residual they see.
    """
    if not 0 <= q <= len(layers):
        raise ValueError(f"q={q} outside [0, {len(layers)}]")
    x = ad.as_tensor(x)
    residual = x
    total = Tensor(np.zeros(x.shape))
    indices, results = [], []
    for cb in layers[:q]:
        if init_rng is not None and not cb.initialized:
            init_from_data(cb, residual.data, init_rng)
        res = vq_encode(residual, cb)
        indices.append(res.indices)
        results.append(res)
        total = total + res.quantized
        residual = residual - res.quantized
    return RVQOutput(indices, total, residual, results)


def sample_dropout_q(rng: np.random.Generator, n_rest_layers: int) -> int:
    """Uniform draw from {0, ..., n_rest_layers}; 0 keeps only the semantic layer."""
    if n_rest_layers < 1:
        raise ValueError("need at least one residual layer")
    return int(rng.integers(0, n_rest_layers + 1))


def _projected_rows(cb: ProjectedCodebook, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim == 2:
        z = z[None]
    return (cb.w_in.data @ z).transpose(0, 2, 1).reshape(-1, cb.code_dim)


def init_from_data(cb: ProjectedCodebook, z: np.ndarray, rng: np.random.Generator) -> None:
    """Set codewords to random projected inputs drawn from a (B, H, T) batch."""
    rows = _projected_rows(cb, z)
    if len(rows) == 0:
        return
    pick = rng.choice(len(rows), size=cb.size, replace=len(rows) < cb.size)
    scale = rows.std() + 1e-12
    jitter = 1e-2 * scale * rng.normal(size=(cb.size, cb.code_dim))
    cb.codewords.data[...] = rows[pick] + jitter
    cb.initialized = True
    cb.usage[:] = 0


def reinit_dead_codes(cb: ProjectedCodebook, usage_counts: np.ndarray, batch_projections: np.ndarray, rng) -> int:
    """Reset codewords with zero usage to randomly chosen rows of ``batch_projections`` (N, D)."""
    batch_projections = np.asarray(batch_projections, dtype=np.float64)
    dead = np.flatnonzero(np.asarray(usage_counts) == 0)
    if len(batch_projections) == 0 or len(dead) == 0:
        return 0
    pick = rng.integers(0, len(batch_projections), size=len(dead))
    scale = batch_projections.std() + 1e-12
    cb.codewords.data[dead] = batch_projections[pick] + 1e-2 * scale * rng.normal(size=(len(dead), cb.code_dim))
    return len(dead)
