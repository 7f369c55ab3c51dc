"""Pooled-simplex encoder/decoder between label maps and latents.

``encode`` block-averages the one-hot view, so every latent cell is a point on the
7-simplex. ``decode`` trilinearly upsamples each channel back to voxel resolution
(sample points at voxel centres, edge-clamped) and takes the per-voxel argmax.
Clusters narrower than the block size do not survive the round trip.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import N_TISSUES, LabelMap, Latent, argmax_labels, onehot


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 4
    channels: int = N_TISSUES
    voxel_size: float = 1.4

    def __post_init__(self):
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise ValueError("downsample_factor must be an integer >= 1")
        if self.channels != N_TISSUES:
            raise ValueError(f"codec channels must be {N_TISSUES}")

    def latent_dims(self, dims) -> tuple[int, int, int, int]:
        f = self.downsample_factor
        if any(d % f for d in dims):
            raise ValueError(f"label-map dims {tuple(dims)} not divisible by factor {f}")
        return (self.channels,) + tuple(d // f for d in dims)


def encode(lmap: LabelMap, cfg: CodecConfig) -> Latent:
    f = cfg.downsample_factor
    _, lx, ly, lz = cfg.latent_dims(lmap.dims)
    oh = onehot(lmap)
    pooled = oh.reshape(N_TISSUES, lx, f, ly, f, lz, f).mean(axis=(2, 4, 6))
    return Latent(pooled, sigma_tag=0.0)


@lru_cache(maxsize=32)
def _interp_matrix(n_coarse: int, f: int) -> np.ndarray:
    """(n_coarse*f, n_coarse) linear-interpolation weights at fine voxel centres."""
    n_fine = n_coarse * f
    pos = (np.arange(n_fine) + 0.5) / f - 0.5
    pos = np.clip(pos, 0.0, n_coarse - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_coarse - 1)
    w = pos - lo
    m = np.zeros((n_fine, n_coarse))
    rows = np.arange(n_fine)
    np.add.at(m, (rows, lo), 1.0 - w)
    np.add.at(m, (rows, hi), w)
    m.setflags(write=False)
    return m


def upsample(values: np.ndarray, f: int) -> np.ndarray:
    """Separable trilinear upsampling of ``(c, lx, ly, lz)`` by factor ``f``."""
    if f == 1:
        return np.array(values, dtype=np.float64)
    _, lx, ly, lz = values.shape
    mx, my, mz = _interp_matrix(lx, f), _interp_matrix(ly, f), _interp_matrix(lz, f)
    out = np.einsum("Xx,cxyz->cXyz", mx, values)
    out = np.einsum("Yy,cXyz->cXYz", my, out)
    return np.einsum("Zz,cXYz->cXYZ", mz, out)


def decode(z: Latent, cfg: CodecConfig) -> LabelMap:
    if z.values.shape[0] != N_TISSUES:
        raise ValueError(f"latent has {z.values.shape[0]} channels, expected {N_TISSUES}")
    full = upsample(z.values, cfg.downsample_factor)
    return LabelMap(argmax_labels(full), voxel_size=cfg.voxel_size)


def roundtrip(lmap: LabelMap, cfg: CodecConfig) -> LabelMap:
    return decode(encode(lmap, cfg), cfg)
