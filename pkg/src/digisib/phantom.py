"""Procedural cardiac-like label maps with known morphology and topology.

Geometry (z is superior, atria sit above ventricles):

* LV is an ellipsoid wrapped in a Myo shell of fixed thickness. The shell stops at
  ``z_cap`` so the upper LV dome is exposed for the LA and the aortic root.
* RV is an ellipsoid on the -x side, clipped to stay outside the LV+Myo ellipsoid.
* LA sits on the LV dome, RA on top of the RV, with RA clipped two voxels away
  from the LA.
* Ao is a vertical tube rising from the anterior part of the LV dome.

Every parameter set inside :func:`in_envelope` rasterizes to a map with zero
topology violations; the test suite checks this over many random draws.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Cohort, LabelMap, Provenance, RngStream, TissueId

T = TissueId
_N6 = ndimage.generate_binary_structure(3, 1)

# Fraction of the LV z semi-axis above the centre where the Myo shell ends.
MYO_CAP = 0.5


@dataclass(frozen=True)
class PhantomParams:
    """Ellipsoid centres/semi-axes in mm, world frame with origin at the grid corner."""

    lv_center: tuple[float, float, float]
    lv_axes: tuple[float, float, float]
    rv_center: tuple[float, float, float]
    rv_axes: tuple[float, float, float]
    la_center: tuple[float, float, float]
    la_axes: tuple[float, float, float]
    ra_center: tuple[float, float, float]
    ra_axes: tuple[float, float, float]
    myo_thickness: float
    ao_radius: float
    ao_length: float
    jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("lv_axes", "rv_axes", "la_axes", "ra_axes"):
            if min(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.myo_thickness <= 0 or self.ao_radius <= 0 or self.ao_length <= 0:
            raise ValueError("myo_thickness, ao_radius and ao_length must be positive")

    @property
    def ao_center(self) -> tuple[float, float]:
        cx, cy, _ = self.lv_center
        return cx, cy + 0.55 * self.lv_axes[1]

    def rv_volume_ml(self) -> float:
        """Analytic (unclipped) RV ellipsoid volume."""
        return 4.0 / 3.0 * np.pi * float(np.prod(self.rv_axes)) / 1000.0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def layout(lv_axes, rv_axes, la_axes, ra_axes, myo_thickness, ao_radius, ao_length,
           dims=(32, 32, 32), voxel_size=1.4, jitter=(0.0, 0.0, 0.0)) -> PhantomParams:
    """Place the chambers relative to each other and centre the bounding box in the grid."""
    lv_axes, rv_axes = np.asarray(lv_axes, float), np.asarray(rv_axes, float)
    la_axes, ra_axes = np.asarray(la_axes, float), np.asarray(ra_axes, float)
    t = float(myo_thickness)
    lv = np.zeros(3)
    septum = -(lv_axes[0] + t)
    rv = np.array([septum - 0.5 * rv_axes[0], 0.0, -0.15 * lv_axes[2]])
    la = np.array([-0.2 * lv_axes[0], -0.3 * lv_axes[1], lv_axes[2] + 0.5 * la_axes[2]])
    ra = np.array([rv[0], 0.0, rv[2] + rv_axes[2] + 0.5 * ra_axes[2]])
    p = PhantomParams(tuple(lv), tuple(lv_axes), tuple(rv), tuple(rv_axes), tuple(la),
                      tuple(la_axes), tuple(ra), tuple(ra_axes), t, float(ao_radius),
                      float(ao_length))
    lo, hi = bounding_box(p)
    shift = np.asarray(dims, float) * voxel_size / 2.0 - (lo + hi) / 2.0 + np.asarray(jitter, float)
    return translate(replace(p, jitter=tuple(float(j) for j in jitter)), shift)


def translate(p: PhantomParams, shift) -> PhantomParams:
    s = np.asarray(shift, float)
    mv = lambda c: tuple(float(v) for v in np.asarray(c) + s)  # noqa: E731
    return replace(p, lv_center=mv(p.lv_center), rv_center=mv(p.rv_center),
                   la_center=mv(p.la_center), ra_center=mv(p.ra_center))


def bounding_box(p: PhantomParams) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned world-frame box (mm) enclosing every tissue."""
    t = p.myo_thickness
    boxes = [
        (np.asarray(p.lv_center), np.asarray(p.lv_axes) + t),
        (np.asarray(p.rv_center), np.asarray(p.rv_axes)),
        (np.asarray(p.la_center), np.asarray(p.la_axes)),
        (np.asarray(p.ra_center), np.asarray(p.ra_axes)),
    ]
    lo = np.min([c - a for c, a in boxes], axis=0)
    hi = np.max([c + a for c, a in boxes], axis=0)
    ax, ay = p.ao_center
    top = p.lv_center[2] + p.lv_axes[2] + p.ao_length
    lo = np.minimum(lo, [ax - p.ao_radius, ay - p.ao_radius, lo[2]])
    hi = np.maximum(hi, [ax + p.ao_radius, ay + p.ao_radius, top])
    return lo, hi


def in_envelope(p: PhantomParams, dims, voxel_size: float, margin_vox: float = 2.0) -> bool:
    """Parameter envelope inside which rasterization is topologically valid.

    * every chamber semi-axis >= 2.5 voxels
    * Myo thickness in [1.5, 4] voxels
    * Ao radius >= 1 voxel, Ao length >= 2 voxels
    * the bounding box keeps ``margin_vox`` voxels to every grid face
    """
    v = voxel_size
    for ax in (p.lv_axes, p.rv_axes, p.la_axes, p.ra_axes):
        if min(ax) < 2.5 * v:
            return False
    if not (1.5 * v <= p.myo_thickness <= 4.0 * v):
        return False
    if p.ao_radius < 1.0 * v or p.ao_length < 2.0 * v:
        return False
    lo, hi = bounding_box(p)
    ext = np.asarray(dims, float) * v
    return bool(np.all(lo >= margin_vox * v) and np.all(hi <= ext - margin_vox * v))


def _ellipsoid(grid, center, axes, inflate: float = 0.0) -> np.ndarray:
    x, y, z = grid
    c, a = np.asarray(center), np.asarray(axes) + inflate
    return ((x - c[0]) / a[0]) ** 2 + ((y - c[1]) / a[1]) ** 2 + ((z - c[2]) / a[2]) ** 2 <= 1.0


def _grid(dims, voxel_size):
    axes = [(np.arange(n) + 0.5) * voxel_size for n in dims]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def rasterize(p: PhantomParams, dims=(32, 32, 32), voxel_size: float = 1.4,
              margin_vox: float = 2.0) -> LabelMap:
    """Voxelize ``p`` (voxel centres tested for membership) into a label map."""
    lo, hi = bounding_box(p)
    ext = np.asarray(dims, float) * voxel_size
    if np.any(lo < margin_vox * voxel_size) or np.any(hi > ext - margin_vox * voxel_size):
        raise ValueError("phantom does not fit inside the grid with the required margin")
    g = _grid(dims, voxel_size)
    x, y, z = g
    lab = np.zeros(tuple(dims), dtype=np.uint8)

    lv = _ellipsoid(g, p.lv_center, p.lv_axes)
    outer = _ellipsoid(g, p.lv_center, p.lv_axes, inflate=p.myo_thickness)
    z_cap = p.lv_center[2] + MYO_CAP * p.lv_axes[2]
    myo = outer & ~lv & (z <= z_cap)
    lab[lv] = T.LV
    lab[myo] = T.Myo

    lv_grown = ndimage.binary_dilation(lv, structure=_N6)
    rv = _ellipsoid(g, p.rv_center, p.rv_axes) & ~outer & ~lv_grown
    lab[rv] = T.RV

    la = _ellipsoid(g, p.la_center, p.la_axes) & (lab == T.Background)
    lab[la] = T.LA

    la_grown = ndimage.binary_dilation(la, structure=_N6, iterations=2)
    ra = _ellipsoid(g, p.ra_center, p.ra_axes) & (lab == T.Background) & ~la_grown
    lab[ra] = T.RA

    ax, ay = p.ao_center
    z0 = p.lv_center[2]
    tube = (((x - ax) ** 2 + (y - ay) ** 2) <= p.ao_radius**2) & (z >= z0) & (
        z <= z0 + p.lv_axes[2] + p.ao_length)
    lab[tube & (lab == T.Background)] = T.Ao
    return LabelMap(lab, voxel_size)


# --------------------------------------------------------------------------- population


_SIZE_KEYS = ("lv_axes", "rv_axes", "la_axes", "ra_axes", "myo_thickness", "ao_radius", "ao_length")


@dataclass
class PopulationSpec:
    """Log-normal population over phantom sizes with an optional rare large-RV mode.

    ``location`` holds per-parameter medians in mm (scalars or 3-vectors); ``scale``
    the matching log-space standard deviations. A draw comes from the rare mode with
    probability ``rare_weight``; the rare mode multiplies the RV semi-axes by
    ``rare_rv_factor``.
    """

    location: dict = field(default_factory=lambda: {
        "lv_axes": [8.4, 8.4, 10.5],
        "rv_axes": [6.3, 8.4, 8.4],
        "la_axes": [7.0, 7.0, 4.9],
        "ra_axes": [7.0, 7.0, 4.9],
        "myo_thickness": 2.8,
        "ao_radius": 2.8,
        "ao_length": 8.4,
    })
    scale: dict = field(default_factory=lambda: {
        "lv_axes": 0.08, "rv_axes": 0.06, "la_axes": 0.07, "ra_axes": 0.07,
        "myo_thickness": 0.05, "ao_radius": 0.05, "ao_length": 0.05,
    })
    jitter_mm: float = 1.0
    rare_weight: float = 0.1
    rare_rv_factor: float = 1.3
    dims: tuple[int, int, int] = (32, 32, 32)
    voxel_size: float = 1.4
    max_tries: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.rare_weight <= 1.0:
            raise ValueError("rare_weight must lie in [0, 1]")
        for k in _SIZE_KEYS:
            if k not in self.location:
                raise ValueError(f"population location missing {k!r}")
            if np.any(np.asarray(self.scale.get(k, 0.0)) < 0):
                raise ValueError(f"scale for {k!r} must be >= 0")
        if self.jitter_mm < 0 or self.rare_rv_factor <= 0:
            raise ValueError("jitter_mm must be >= 0 and rare_rv_factor > 0")
        self.dims = tuple(int(d) for d in self.dims)

    def mode_location(self, rare: bool) -> dict:
        loc = {k: np.asarray(v, float) for k, v in self.location.items()}
        if rare:
            loc["rv_axes"] = loc["rv_axes"] * self.rare_rv_factor
        return loc

    def mode_rv_volume_mean(self, rare: bool) -> float:
        """Analytic mean of the (unclipped) RV ellipsoid volume under one mode, ml."""
        loc = np.log(self.mode_location(rare)["rv_axes"])
        s = np.broadcast_to(np.asarray(self.scale["rv_axes"], float), (3,))
        # product of independent log-normals
        return 4.0 / 3.0 * np.pi * float(np.exp(loc.sum() + 0.5 * (s**2).sum())) / 1000.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        base = cls()
        kw = dict(d)
        if "location" in kw:
            kw["location"] = {**base.location, **kw["location"]}
        if "scale" in kw:
            kw["scale"] = {**base.scale, **kw["scale"]}
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "PopulationSpec":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            return cls.from_dict(yaml.safe_load(text) or {})
        return cls.from_dict(json.loads(text))


def _draw_sizes(spec: PopulationSpec, gen: np.random.Generator, rare: bool) -> dict:
    loc = spec.mode_location(rare)
    out = {}
    for k in _SIZE_KEYS:
        m = loc[k]
        s = np.broadcast_to(np.asarray(spec.scale.get(k, 0.0), float), m.shape)
        out[k] = m * np.exp(s * gen.standard_normal(m.shape))
    return out


def sample_params(spec: PopulationSpec, rng: RngStream | np.random.Generator,
                  return_mode: bool = False):
    """Draw one parameter set, rejection-resampling until it lies in the envelope."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    for _ in range(spec.max_tries):
        rare = bool(gen.random() < spec.rare_weight)
        sizes = _draw_sizes(spec, gen, rare)
        jitter = spec.jitter_mm * gen.standard_normal(3)
        p = layout(sizes["lv_axes"], sizes["rv_axes"], sizes["la_axes"], sizes["ra_axes"],
                   float(sizes["myo_thickness"]), float(sizes["ao_radius"]),
                   float(sizes["ao_length"]), spec.dims, spec.voxel_size, jitter)
        if in_envelope(p, spec.dims, spec.voxel_size):
            return (p, rare) if return_mode else p
    raise RuntimeError(f"no in-envelope phantom after {spec.max_tries} draws; "
                       "population spec is pathological for this grid")


def canonical_params(spec: PopulationSpec | None = None) -> PhantomParams:
    spec = spec or PopulationSpec()
    loc = spec.mode_location(False)
    return layout(loc["lv_axes"], loc["rv_axes"], loc["la_axes"], loc["ra_axes"],
                  float(loc["myo_thickness"]), float(loc["ao_radius"]),
                  float(loc["ao_length"]), spec.dims, spec.voxel_size)


def generate_cohort(spec: PopulationSpec, n: int, master_seed: int) -> tuple[Cohort, list[PhantomParams], list[bool]]:
    """Member ``k`` is drawn from ``RngStream(master_seed, k)``."""
    members, params, modes, prov = [], [], [], []
    for k in range(n):
        p, rare = sample_params(spec, RngStream(master_seed, k), return_mode=True)
        members.append(rasterize(p, spec.dims, spec.voxel_size))
        params.append(p)
        modes.append(rare)
        prov.append(Provenance(f"phantom-{k:04d}", "phantom",
                               {"rare_mode": rare, **p.to_dict()}, (master_seed, k)))
    return Cohort(members, prov), params, modes


# --------------------------------------------------------------------------- defect injectors


def _line_voxels(a: np.ndarray, b: np.ndarray) -> list[tuple[int, int, int]]:
    """6-connected voxel path from ``a`` to ``b`` (axis steps, largest gap first)."""
    cur = a.astype(int).copy()
    path = [tuple(cur)]
    while not np.array_equal(cur, b):
        d = b - cur
        ax = int(np.argmax(np.abs(d)))
        cur[ax] += int(np.sign(d[ax]))
        path.append(tuple(cur))
    return path


def _closest_pair(lab: np.ndarray, a: int, b: int, prefer_z: float | None = None):
    pa, pb = np.argwhere(lab == a), np.argwhere(lab == b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("both tissues must be present")
    d = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1).astype(float)
    if prefer_z is not None:
        d = d + 1e-3 * np.abs(pa[:, None, 2] - prefer_z)
    i, j = np.unravel_index(int(np.argmin(d)), d.shape)
    return pa[i], pb[j]


def split_component(lmap: LabelMap, tissue: TissueId = T.LV) -> LabelMap:
    """Cut ``tissue`` in two with a one-voxel background slab through its centroid (z)."""
    lab = lmap.labels.copy()
    pts = np.argwhere(lab == tissue)
    zc = int(round(pts[:, 2].mean()))
    sl = lab[:, :, zc]
    sl[sl == tissue] = T.Background
    return LabelMap(lab, lmap.voxel_size)


def bridge_atria(lmap: LabelMap) -> LabelMap:
    """Connect LA to RA through the gap between them (LA-labelled bridge)."""
    lab = lmap.labels.copy()
    a, b = _closest_pair(lab, T.LA, T.RA)
    for v in _line_voxels(a, b)[1:-1]:
        lab[v] = T.LA
    return LabelMap(lab, lmap.voxel_size)


def septal_defect(lmap: LabelMap) -> LabelMap:
    """Punch an LV-labelled channel through the septal Myo so LV touches RV."""
    lab = lmap.labels.copy()
    zc = float(np.argwhere(lab == T.LV)[:, 2].mean())
    a, b = _closest_pair(lab, T.LV, T.RV, prefer_z=zc)
    for v in _line_voxels(a, b)[1:-1]:
        lab[v] = T.LV
    return LabelMap(lab, lmap.voxel_size)


DEFECTS = {
    "split_lv": (lambda m: split_component(m, T.LV), "cc_LV"),
    "bridge_atria": (bridge_atria, "noadj_LA_RA"),
    "septal_defect": (septal_defect, "noadj_LV_RV"),
}
