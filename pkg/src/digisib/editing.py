"""Perturbational (scale-specific) and localized (region-specific) editing of seed anatomies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .codec import CodecConfig, decode, encode
from .core import LabelMap, Latent, LatentMask, RngStream, TissueId, parse_tissue
from .diffusion import Denoiser, NoiseSchedule, integrate

_N6 = ndimage.generate_binary_structure(3, 1)


def start_index(psi: float, N: int) -> int:
    """Schedule index the edit restarts from: ``round((1 - psi) * N)`` clamped to ``[0, N-1]``.

    ``psi = 1`` restarts from ``sigma_max``; ``psi -> 0+`` only re-applies the final denoise.
    """
    if not 0.0 < psi <= 1.0:
        raise ValueError(f"psi must lie in (0, 1], got {psi}")
    i = math.floor((1.0 - psi) * N + 0.5)
    return min(max(i, 0), N - 1)


@dataclass(frozen=True)
class PerturbSpec:
    psi: float
    schedule: NoiseSchedule
    rng: RngStream

    def __post_init__(self):
        if not 0.0 < self.psi <= 1.0:
            raise ValueError(f"psi must lie in (0, 1], got {self.psi}")


def perturb_latent(z: np.ndarray, psi: float, denoiser: Denoiser, schedule: NoiseSchedule,
                   gen: np.random.Generator, order: str = "heun") -> np.ndarray:
    i = start_index(psi, len(schedule.sigmas))
    z_sigma = z + schedule.sigmas[i] * gen.standard_normal(z.shape)
    return integrate(denoiser, schedule, z_sigma, start=i, order=order)


def perturb_edit(seed: LabelMap, spec: PerturbSpec, denoiser: Denoiser, codec: CodecConfig,
                 order: str = "heun") -> LabelMap:
    z = encode(seed, codec).values
    out = perturb_latent(z, spec.psi, denoiser, spec.schedule, spec.rng.generator(), order)
    return decode(Latent(out), codec)


@dataclass(frozen=True)
class EditMaskSpec:
    preserve_tissues: frozenset = field(default_factory=frozenset)
    dilation_rounds: int = 2

    def __post_init__(self):
        tissues = frozenset(parse_tissue(t) for t in self.preserve_tissues)
        if TissueId.Background in tissues:
            raise ValueError("Background cannot be in the preserve set")
        if self.dilation_rounds < 0:
            raise ValueError("dilation_rounds must be >= 0")
        object.__setattr__(self, "preserve_tissues", tissues)

    @classmethod
    def editing(cls, edit_tissues, dilation_rounds: int = 2, exclude=(TissueId.Myo,)) -> "EditMaskSpec":
        """Preserve every foreground tissue except ``edit_tissues`` and ``exclude``."""
        drop = {parse_tissue(t) for t in edit_tissues} | {parse_tissue(t) for t in exclude}
        keep = {t for t in TissueId if t != TissueId.Background and t not in drop}
        return cls(frozenset(keep), dilation_rounds)


def build_mask(seed: LabelMap, spec: EditMaskSpec, codec: CodecConfig) -> LatentMask:
    """Preserve-voxels -> block-any downsample to latent dims -> 6-connected dilation."""
    f = codec.downsample_factor
    _, lx, ly, lz = codec.latent_dims(seed.dims)
    full = np.isin(seed.labels, [int(t) for t in spec.preserve_tissues])
    m = full.reshape(lx, f, ly, f, lz, f).any(axis=(1, 3, 5))
    if spec.dilation_rounds and m.any():
        m = ndimage.binary_dilation(m, structure=_N6, iterations=spec.dilation_rounds)
    return LatentMask(m)


def local_edit_latent(z_seed: np.ndarray, mask: np.ndarray, denoiser: Denoiser,
                      schedule: NoiseSchedule, gen: np.random.Generator,
                      order: str = "heun") -> np.ndarray:
    """Inpainting sampler; preserved cells are reset to the noised seed after every step.

    The initial noise is drawn exactly as in unconditional sampling, so an all-zero
    mask reproduces :func:`digisib.diffusion.sample` bit for bit under a shared stream.
    """
    keep = np.broadcast_to(mask.astype(bool), z_seed.shape)
    z0 = schedule.sigmas[0] * gen.standard_normal(z_seed.shape)

    def replace(z, i, sigma):
        fresh = z_seed + sigma * gen.standard_normal(z_seed.shape)
        return np.where(keep, fresh, z)

    out = integrate(denoiser, schedule, z0, 0, order, after_step=replace)
    return np.where(keep, z_seed, out)


def local_edit(seed: LabelMap, mask: LatentMask, denoiser: Denoiser, schedule: NoiseSchedule,
               codec: CodecConfig, rng: RngStream, order: str = "heun") -> LabelMap:
    z = encode(seed, codec).values
    if mask.dims != z.shape[1:]:
        raise ValueError(f"mask dims {mask.dims} do not match latent dims {z.shape[1:]}")
    out = local_edit_latent(z, mask.values, denoiser, schedule, rng.generator(), order)
    return decode(Latent(out), codec)
