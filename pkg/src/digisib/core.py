"""Domain types shared by every module: label maps, latents, masks, cohorts, RNG streams."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

N_TISSUES = 7


class TissueId(enum.IntEnum):
    Background = 0
    Ao = 1
    Myo = 2
    RV = 3
    LV = 4
    RA = 5
    LA = 6


TISSUE_NAMES = [t.name for t in TissueId]

# Chambers entering the morphology vector, in vector order.
CHAMBERS = (TissueId.LV, TissueId.RV, TissueId.LA, TissueId.RA)


def parse_tissue(name: str | int | TissueId) -> TissueId:
    if isinstance(name, TissueId):
        return name
    if isinstance(name, (int, np.integer)):
        return TissueId(int(name))
    for t in TissueId:
        if t.name.lower() == str(name).strip().lower():
            return t
    raise ValueError(f"unknown tissue {name!r}; expected one of {TISSUE_NAMES}")


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Dense 3D grid of tissue labels, one byte per voxel.

    ``labels`` is indexed ``[x, y, z]``; ``voxel_size`` is the isotropic edge length in mm.
    """

    labels: np.ndarray
    voxel_size: float = 1.4

    def __post_init__(self):
        lab = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if lab.ndim != 3 or min(lab.shape) <= 0:
            raise ValueError(f"label map must be a non-empty 3D grid, got shape {lab.shape}")
        if lab.size and int(lab.max()) >= N_TISSUES:
            raise ValueError(f"label values must lie in [0, {N_TISSUES - 1}]")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)  # type: ignore[return-value]

    @property
    def voxel_volume_ml(self) -> float:
        return self.voxel_size**3 / 1000.0

    def count(self, tissue: TissueId) -> int:
        return int(np.count_nonzero(self.labels == tissue))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.voxel_size == other.voxel_size and np.array_equal(self.labels, other.labels)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Latent:
    """Multi-channel real-valued grid ``values[c, x, y, z]`` plus the noise level it carries."""

    values: np.ndarray
    sigma_tag: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"latent must have shape (c, lx, ly, lz), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("latent values must be finite")
        if self.sigma_tag < 0:
            raise ValueError("sigma_tag must be >= 0")
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class LatentMask:
    """Binary spatial mask over latent cells; 1 = preserve the seed, 0 = regenerate."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"latent mask must be 3D, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("latent mask must be binary")
        v = v.astype(bool)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


@dataclass
class Provenance:
    seed_id: str | None
    method: str
    params: dict[str, Any] = field(default_factory=dict)
    rng_seed: tuple[int, int] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed_id": self.seed_id,
            "method": self.method,
            "params": self.params,
            "rng_seed": list(self.rng_seed) if self.rng_seed is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Provenance":
        rs = d.get("rng_seed")
        return cls(d.get("seed_id"), d["method"], dict(d.get("params", {})), tuple(rs) if rs else None)


@dataclass
class Cohort:
    members: list[LabelMap] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)

    def __post_init__(self):
        if self.provenance and len(self.provenance) != len(self.members):
            raise ValueError("provenance must have one record per member")
        if not self.provenance:
            self.provenance = [Provenance(None, "unknown") for _ in self.members]
        if self.members:
            d0, v0 = self.members[0].dims, self.members[0].voxel_size
            for m in self.members[1:]:
                if m.dims != d0 or m.voxel_size != v0:
                    raise ValueError("all cohort members must share dims and voxel_size")

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def subset(self, idx: Sequence[int]) -> "Cohort":
        return Cohort([self.members[i] for i in idx], [self.provenance[i] for i in idx])


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(master_seed, stream_index)``.

    Distinct stream indices give independent streams (``SeedSequence`` spawn keys),
    so cohort member ``k`` always draws from stream ``k`` whatever the worker layout.
    """

    master_seed: int
    stream_index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.master_seed & (2**64 - 1),
                                    spawn_key=(self.stream_index & (2**64 - 1),))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngStream":
        """Derive a sub-stream (e.g. member ``index`` of a sub-experiment)."""
        mixed = np.random.SeedSequence(entropy=self.master_seed & (2**64 - 1),
                                       spawn_key=(self.stream_index & (2**64 - 1),))
        return RngStream(int(mixed.generate_state(1, np.uint64)[0]), index)


def onehot(lmap: LabelMap) -> np.ndarray:
    """Return the 7-channel one-hot view ``(7, nx, ny, nz)`` as float64."""
    lab = lmap.labels
    out = np.zeros((N_TISSUES,) + lab.shape, dtype=np.float64)
    np.put_along_axis(out, lab[None].astype(np.intp), 1.0, axis=0)
    return out


def argmax_labels(channels: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over the channel axis; ties go to the lowest tissue id."""
    return np.argmax(channels, axis=0).astype(np.uint8)


def gaussian_noise(dims: Sequence[int], sigma: float,
                   rng: RngStream | np.random.Generator) -> Latent:
    """I.i.d. ``N(0, sigma^2)`` latent of shape ``dims`` tagged with ``sigma``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return Latent(sigma * gen.standard_normal(tuple(dims)), sigma_tag=float(sigma))
