"""Codebook quantizer: nearest-codeword assignment, lookup and the VQ loss terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor

# positions per distance block; bounds the (chunk, K, D) temporary
_CHUNK = 4096


class Codebook:
    """K x D learnable codewords, checkpointed under the name ``codebook``."""

    name = "codebook"

    def __init__(self, e: np.ndarray):
        e = np.asarray(e)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ShapeError(f"codebook must be K x D with K, D >= 1, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook contains non-finite values")
        self.e = Parameter(e, name=self.name)

    @classmethod
    def init(cls, K: int, D: int, rng: np.random.Generator, dtype=np.float32) -> "Codebook":
        return cls(rng.uniform(-1.0 / K, 1.0 / K, (K, D)).astype(dtype))

    @property
    def K(self) -> int:
        return self.e.shape[0]

    @property
    def D(self) -> int:
        return self.e.shape[1]


@dataclass(frozen=True)
class IndexMap:
    indices: np.ndarray  # (..., h, w) integer grid
    K: int

    def __post_init__(self):
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.K):
            raise ValueError("index outside [0, K)")


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def quantize(z_e, cb: Codebook) -> IndexMap:
    """Index of the nearest codeword at every position; ties go to the lowest index."""
    z = _values(z_e)
    e = cb.e.data
    if z.shape[-1] != cb.D:
        raise ShapeError(f"feature channels {z.shape[-1]} != codeword length {cb.D}")
    flat = z.reshape(-1, cb.D)
    out = np.empty(flat.shape[0], dtype=np.int64)
    for s in range(0, flat.shape[0], _CHUNK):
        diff = flat[s:s + _CHUNK, None, :] - e[None, :, :]
        out[s:s + _CHUNK] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return IndexMap(out.reshape(z.shape[:-1]), cb.K)


def dequantize(idx: IndexMap, cb: Codebook) -> Tensor:
    """Look up ``e[idx]``; differentiable with respect to the codebook."""
    if idx.K != cb.K:
        raise ValueError(f"index map built for K={idx.K}, codebook has K={cb.K}")
    ind = np.asarray(idx.indices)
    if ind.size and (ind.min() < 0 or ind.max() >= cb.K):
        raise IndexError("index outside codebook range")
    return ad.gather_rows(cb.e, ind)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    return ad.straight_through(z_e, z_q)


def vq_losses(z_e: Tensor, z_q: Tensor, beta: float = 0.25) -> tuple[Tensor, Tensor]:
    """(codebook term, commitment term), both averaged over positions.

    The codebook term only moves codewords; the commitment term only moves
    the encoder output.
    """
    if z_e.shape != z_q.shape:
        raise ShapeError(f"z_e {z_e.shape} and z_q {z_q.shape} differ")
    if beta <= 0:
        raise ValueError("beta must be positive")
    axes = tuple(range(z_e.data.ndim - 1))
    codebook_term = ad.mean(ad.sum(ad.square(ad.sg(z_e) - z_q), axis=-1), axis=axes)
    commitment = ad.mean(ad.sum(ad.square(z_e - ad.sg(z_q)), axis=-1), axis=axes) * beta
    return codebook_term, commitment


def codebook_usage(idx: IndexMap) -> np.ndarray:
    return np.bincount(np.asarray(idx.indices).reshape(-1), minlength=idx.K)


def usage_entropy_bits(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum())


def reseed_dead_codewords(cb: Codebook, z_e: np.ndarray, counts: np.ndarray,
                          rng: np.random.Generator) -> int:
    """Move unused codewords onto random encoder outputs. Off by default in training."""
    dead = np.flatnonzero(counts == 0)
    if dead.size == 0:
        return 0
    flat = np.asarray(z_e).reshape(-1, cb.D)
    picks = rng.integers(0, flat.shape[0], dead.size)
    cb.e.data[dead] = flat[picks]
    return int(dead.size)
