"""End-to-end experiment drivers at phantom scale.

Each driver builds (or reuses) a :class:`Model`: a reference phantom cohort, its
latents, and an analytic denoiser over those latents standing in for a trained
network (a block-tangent mixture by default, see
:class:`digisib.diffusion.TangentMixtureDenoiser`). The diffusion model works on
``scale * latent`` where the scale brings the per-cell spread between reference
members to ``SIGMA_DATA``; decoding is unaffected because the argmax ignores
positive scaling. Member ``k`` of any generated cohort draws all its noise
from ``RngStream(run_seed, k)``; members are processed in fixed-size chunks so the
numbers do not depend on how many workers run the chunks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from .anatomy_metrics import CHECK_NAMES, MORPH_NAMES, check_topology, morph_features
from .codec import CodecConfig, decode, encode
from .cohort_analytics import (Heatmap, feature_cloud, frechet_distance, heatmap_diff,
                               occupancy_heatmap, precision_recall)
from .core import Cohort, LabelMap, Latent, Provenance, RngStream, TissueId
from .diffusion import (SIGMA_DATA, Denoiser, EmpiricalDenoiser, NoiseSchedule,
                        TangentMixtureDenoiser, build_schedule, integrate)
from .editing import EditMaskSpec, build_mask, start_index
from .phantom import PopulationSpec, generate_cohort

log = logging.getLogger(__name__)

RV_VOLUME = MORPH_NAMES.index("RV_volume_ml")
LV_VOLUME = MORPH_NAMES.index("LV_volume_ml")
LA_VOLUME = MORPH_NAMES.index("LA_volume_ml")
RA_VOLUME = MORPH_NAMES.index("RA_volume_ml")

# quantile band centres for seed archetypes
BANDS = {"up": (0.90, 1.00), "down": (0.00, 0.10), "mid": (0.40, 0.60)}
ARCHETYPES = {
    "LupRup": ("up", "up"),
    "LdownRdown": ("down", "down"),
    "LupRmid": ("up", "mid"),
    "LmidRmid": ("mid", "mid"),
}

# stream offsets so different experiments in one run never share noise
_STREAM_UNCOND, _STREAM_PSI, _STREAM_MASK, _STREAM_AUG, _STREAM_SENS = range(1, 6)


def default_workers() -> int:
    return max(1, int(os.environ.get("DIGISIB_WORKERS", "1")))


@dataclass
class ExperimentConfig:
    population: dict = field(default_factory=dict)
    reference_size: int = 200
    master_seed: int = 0
    codec_factor: int = 2
    steps: int = 20
    rho: float = 3.0
    sigma_min: float = 2e-3
    sigma_max: float = 80.0
    order: str = "heun"
    # "tangent" (block-tangent mixture) or "empirical" (smoothed empirical posterior mean)
    denoiser: str = "tangent"
    # noise-variance multiplier in the denoiser weights (finite-capacity blur)
    temperature: float = 2.0
    # tangent mixture: neighbours per component, tangent scale, block edge in latent cells
    tangent_k: int = 5
    tangent_tau: float = 1.0
    tangent_block: int = 4
    # empirical: bandwidth as a fraction of the median nearest-neighbour latent distance
    bandwidth_rel: float = 0.0
    # empirical: per-point std (scaled units); identity once sigma << local_std
    local_std: float = 0.05
    # multiplier applied to codec latents before diffusion; None derives it from the reference
    latent_scale: float | None = None
    # edits drop the edited twin from the denoiser's mixture weights
    holdout_seed: bool = False
    cohort_size: int = 100
    psi_grid: list = field(default_factory=lambda: [0.35, 0.5, 0.65, 0.8, 1.0])
    edit_count: int = 60
    mask_count: int = 50
    mask_edits: list = field(default_factory=lambda: ["LV", "RV"])
    dilation_rounds: int = 2
    archetypes: list = field(default_factory=lambda: list(ARCHETYPES))
    threshold_ml: float | None = None
    threshold_quantile: float = 0.9
    augment_size: int = 40
    augment_psi: list = field(default_factory=lambda: [0.5, 0.35])
    budget_factor: int = 10
    k: int = 3
    ridge: float = 1e-6
    sens_steps: list = field(default_factory=lambda: [5, 10, 20, 50, 100, 200])
    sens_sizes: list = field(default_factory=lambda: [5, 10, 20, 50, 100, 200])
    chunk: int = 25
    workers: int = field(default_factory=default_workers)

    def __post_init__(self):
        if self.threshold_ml is not None and self.threshold_ml < 0:
            raise ValueError("threshold_ml must be >= 0")
        if not 0 < self.threshold_quantile < 1:
            raise ValueError("threshold_quantile must lie in (0, 1)")
        if self.denoiser not in ("tangent", "empirical"):
            raise ValueError(f"denoiser must be 'tangent' or 'empirical', got {self.denoiser!r}")
        if self.latent_scale is not None and self.latent_scale <= 0:
            raise ValueError("latent_scale must be positive")
        if self.reference_size < 2 or self.steps < 2 or self.chunk < 1:
            raise ValueError("reference_size and steps must be >= 2, chunk >= 1")
        for psi in self.psi_grid + self.augment_psi:
            if not 0 < psi <= 1:
                raise ValueError(f"psi values must lie in (0, 1], got {psi}")
        for a in self.archetypes:
            if a not in ARCHETYPES:
                raise ValueError(f"unknown archetype {a!r}; choose from {list(ARCHETYPES)}")

    def population_spec(self) -> PopulationSpec:
        return PopulationSpec.from_dict(self.population)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d

    def digest(self) -> str:
        """Hash of every setting that can change results (worker count excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # cohort-size figures quoted for the original study, for reference runs
    "study-uncond": {"cohort_size": 360},
    "study-sensitivity": {"cohort_size": 100},
    "desk": {},
}


# --------------------------------------------------------------------------- model


@dataclass
class Model:
    cfg: ExperimentConfig
    reference: Cohort
    ref_features: np.ndarray
    ref_modes: list
    latents: np.ndarray            # scaled reference latents
    codec: CodecConfig
    denoiser: Denoiser
    schedule: NoiseSchedule
    scale: float = 1.0

    @property
    def latent_shape(self) -> tuple:
        return self.latents.shape[1:]

    def threshold(self) -> float:
        if self.cfg.threshold_ml is not None:
            return float(self.cfg.threshold_ml)
        return float(np.quantile(self.ref_features[:, RV_VOLUME], self.cfg.threshold_quantile))

    def with_steps(self, steps: int) -> "Model":
        sch = build_schedule(steps, self.cfg.rho, self.cfg.sigma_min, self.cfg.sigma_max)
        return Model(self.cfg, self.reference, self.ref_features, self.ref_modes, self.latents,
                     self.codec, self.denoiser, sch, self.scale)

    def encode(self, lmap: LabelMap) -> np.ndarray:
        return self.scale * encode(lmap, self.codec).values

    def decode(self, z: np.ndarray) -> LabelMap:
        return decode(Latent(z / self.scale), self.codec)


_MODEL_CACHE: dict[str, Model] = {}


def median_nn_distance(latents: np.ndarray) -> float:
    flat = latents.reshape(len(latents), -1)
    d = cdist(flat, flat)
    np.fill_diagonal(d, np.inf)
    return float(np.median(d.min(axis=1)))


def spread_scale(latents: np.ndarray, sigma_data: float = SIGMA_DATA) -> float:
    """Factor that sets the RMS per-cell std across members to ``sigma_data``."""
    rms = float(np.sqrt(np.mean(np.var(latents, axis=0))))
    if rms == 0:
        raise ValueError("reference latents are identical; cannot derive a latent scale")
    return sigma_data / rms


def make_denoiser(cfg: ExperimentConfig, latents: np.ndarray) -> Denoiser:
    if cfg.denoiser == "tangent":
        return TangentMixtureDenoiser(latents, k=cfg.tangent_k, tau=cfg.tangent_tau,
                                      block=cfg.tangent_block, temperature=cfg.temperature)
    h = cfg.bandwidth_rel * median_nn_distance(latents) if cfg.bandwidth_rel > 0 else 0.0
    return EmpiricalDenoiser(latents, bandwidth=h, local_std=cfg.local_std, temperature=cfg.temperature)


def build_model(cfg: ExperimentConfig) -> Model:
    key = json.dumps({k: v for k, v in cfg.to_dict().items()
                      if k in ("population", "reference_size", "master_seed", "codec_factor",
                               "steps", "rho", "sigma_min", "sigma_max", "denoiser", "temperature",
                               "tangent_k", "tangent_tau", "tangent_block", "bandwidth_rel",
                               "local_std", "latent_scale")},
                     sort_keys=True)
    if key in _MODEL_CACHE:
        # the heavy parts are shared; run settings (threshold, counts, workers) follow cfg
        return replace(_MODEL_CACHE[key], cfg=cfg)
    spec = cfg.population_spec()
    codec = CodecConfig(cfg.codec_factor, voxel_size=spec.voxel_size)
    ref, _, modes = generate_cohort(spec, cfg.reference_size, cfg.master_seed)
    raw = np.stack([encode(m, codec).values for m in ref])
    scale = cfg.latent_scale if cfg.latent_scale is not None else spread_scale(raw)
    latents = scale * raw
    feats = np.array([morph_features(m) for m in ref])
    den = make_denoiser(cfg, latents)
    sch = build_schedule(cfg.steps, cfg.rho, cfg.sigma_min, cfg.sigma_max)
    model = Model(cfg, ref, feats, modes, latents, codec, den, sch, scale)
    _MODEL_CACHE[key] = model
    return model


# --------------------------------------------------------------------------- batched generation


ChunkFn = Callable[[Sequence[int]], np.ndarray]


def _run_chunks(n: int, chunk: int, workers: int, fn: ChunkFn) -> np.ndarray:
    chunks = [list(range(s, min(n, s + chunk))) for s in range(0, n, chunk)]
    if not chunks:
        return np.zeros((0,))
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def _gens(run_seed: int, idx: Sequence[int]) -> list[np.random.Generator]:
    return [RngStream(run_seed, k).generator() for k in idx]


def _normals(gens, shape) -> np.ndarray:
    return np.stack([g.standard_normal(shape) for g in gens])


def generate_unconditional(model: Model, n: int, run_seed: int) -> np.ndarray:
    shape, sch = model.latent_shape, model.schedule

    def fn(idx):
        gens = _gens(run_seed, idx)
        z0 = sch.sigmas[0] * _normals(gens, shape)
        return integrate(model.denoiser, sch, z0, 0, model.cfg.order)

    return _run_chunks(n, model.cfg.chunk, model.cfg.workers, fn)


def _denoiser_for(model: Model, seed_ids: np.ndarray | None, idx: list[int]):
    if seed_ids is None or not model.cfg.holdout_seed:
        return model.denoiser
    return model.denoiser.excluding(np.asarray(seed_ids)[idx])


def generate_perturbed(model: Model, seed_latents: np.ndarray, psi: float, run_seed: int,
                       seed_ids: np.ndarray | None = None) -> np.ndarray:
    """Perturbational edits; row ``k`` edits ``seed_latents[k]`` (reference member ``seed_ids[k]``)."""
    shape, sch = model.latent_shape, model.schedule
    i0 = start_index(psi, len(sch.sigmas))

    def fn(idx):
        idx = list(idx)
        gens = _gens(run_seed, idx)
        z = seed_latents[idx] + sch.sigmas[i0] * _normals(gens, shape)
        return integrate(_denoiser_for(model, seed_ids, idx), sch, z, i0, model.cfg.order)

    return _run_chunks(len(seed_latents), model.cfg.chunk, model.cfg.workers, fn)


def generate_local(model: Model, seed_latents: np.ndarray, masks: np.ndarray, run_seed: int,
                   seed_ids: np.ndarray | None = None) -> np.ndarray:
    """Localized edits; row ``k`` edits ``seed_latents[k]`` preserving ``masks[k]``."""
    shape, sch = model.latent_shape, model.schedule

    def fn(idx):
        idx = list(idx)
        gens = _gens(run_seed, idx)
        zs = seed_latents[idx]
        keep = np.broadcast_to(masks[idx][:, None].astype(bool), zs.shape)
        z0 = sch.sigmas[0] * _normals(gens, shape)

        def replace(z, i, sigma):
            return np.where(keep, zs + sigma * _normals(gens, shape), z)

        den = _denoiser_for(model, seed_ids, idx)
        out = integrate(den, sch, z0, 0, model.cfg.order, after_step=replace)
        return np.where(keep, zs, out)

    return _run_chunks(len(seed_latents), model.cfg.chunk, model.cfg.workers, fn)


def decode_all(model: Model, latents: np.ndarray) -> list[LabelMap]:
    return [model.decode(z) for z in latents]


# --------------------------------------------------------------------------- reports


@dataclass
class CohortReport:
    n: int
    violation_rate: float          # failed checks / (12 n), percent
    violation_rate_maps: float     # maps with any failure, percent
    precision: float | None
    recall: float | None
    fd: float | None
    features: np.ndarray
    checks: np.ndarray             # (n, 12) of 0/1 pass flags

    def summary(self) -> dict:
        return {"n": self.n, "violation_rate": self.violation_rate,
                "violation_rate_maps": self.violation_rate_maps,
                "precision": self.precision, "recall": self.recall, "fd": self.fd}

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.n):
            r = {"member": i}
            r.update({k: float(v) for k, v in zip(MORPH_NAMES, self.features[i])})
            r.update({k: int(v) for k, v in zip(CHECK_NAMES, self.checks[i])})
            r["violations"] = int(len(CHECK_NAMES) - self.checks[i].sum())
            out.append(r)
        return out


def evaluate_cohort(maps: Sequence[LabelMap], ref_features: np.ndarray, norm_features: np.ndarray | None = None,
                    k: int = 3, ridge: float = 1e-6, features: np.ndarray | None = None) -> CohortReport:
    """Topology and morphology of ``maps`` plus PR/FD against ``ref_features``.

    Normalization constants come from ``norm_features`` (default: the reference).
    Metrics that the cohort sizes cannot support are reported as ``None``.
    """
    if len(maps) == 0:
        raise ValueError("cannot report on an empty cohort")
    feats = np.array([morph_features(m) for m in maps]) if features is None else features
    checks = np.array([[int(v) for v in check_topology(m).checks.values()] for m in maps])
    nchk = checks.shape[1]
    tv = 100.0 * float((1 - checks).sum()) / (nchk * len(maps))
    tv_maps = 100.0 * float(np.mean((1 - checks).sum(1) > 0))
    norm = ref_features if norm_features is None else norm_features
    real, synth = feature_cloud(ref_features, norm), feature_cloud(feats, norm)
    prec = rec = fd = None
    if len(real) > k and len(synth) > k:
        prec, rec = precision_recall(real, synth, k)
    if min(len(real), len(synth)) >= feats.shape[1] + 1:
        fd = frechet_distance(real, synth, ridge)
    return CohortReport(len(maps), tv, tv_maps, prec, rec, fd, feats, checks)


# --------------------------------------------------------------------------- seed selection


def quantile_ranks(x: np.ndarray) -> np.ndarray:
    """Mid-rank empirical quantiles in (0, 1); ties share their average rank."""
    return (stats.rankdata(x, method="average") - 0.5) / len(x)


def select_seed(ref_features: np.ndarray, archetype: str) -> int:
    """Member whose (LV, RV) volume quantiles sit closest to the archetype's band centres.

    Members inside both bands are preferred; ties go to the lowest index.
    """
    lv_band, rv_band = (BANDS[b] for b in ARCHETYPES[archetype])
    ql = quantile_ranks(ref_features[:, LV_VOLUME])
    qr = quantile_ranks(ref_features[:, RV_VOLUME])
    cl, cr = np.mean(lv_band), np.mean(rv_band)
    inside = (ql >= lv_band[0]) & (ql <= lv_band[1]) & (qr >= rv_band[0]) & (qr <= rv_band[1])
    score = np.maximum(np.abs(ql - cl), np.abs(qr - cr)) + np.where(inside, 0.0, 1.0)
    return int(np.argmin(score))


# --------------------------------------------------------------------------- experiments


@dataclass
class UnconditionalResult:
    cohort: Cohort
    latents: np.ndarray
    report: CohortReport
    heatmap_ref: Heatmap
    heatmap_synth: Heatmap
    diff: np.ndarray
    diff_mask: np.ndarray


def run_unconditional(cfg: ExperimentConfig, model: Model | None = None, n: int | None = None) -> UnconditionalResult:
    n = cfg.cohort_size if n is None else n
    if n <= 0:
        raise ValueError("cohort size is 0; nothing to report")
    model = model or build_model(cfg)
    seed = _run_seed(cfg, _STREAM_UNCOND)
    lat = generate_unconditional(model, n, seed)
    maps = decode_all(model, lat)
    prov = [Provenance(None, "unconditional", {"steps": len(model.schedule)}, (seed, k)) for k in range(n)]
    rep = evaluate_cohort(maps, model.ref_features, k=cfg.k, ridge=cfg.ridge)
    h_ref, h_syn = occupancy_heatmap(model.reference), occupancy_heatmap(maps)
    diff, mask = heatmap_diff(h_ref, h_syn)
    return UnconditionalResult(Cohort(maps, prov), lat, rep, h_ref, h_syn, diff, mask)


def _run_seed(cfg: ExperimentConfig, stream: int, sub: int = 0) -> int:
    ss = np.random.SeedSequence(cfg.master_seed, spawn_key=(stream, sub))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class EditCohort:
    seed_name: str
    seed_index: int
    setting: str
    cohort: Cohort
    report: CohortReport
    diff: np.ndarray
    diff_mask: np.ndarray
    seed_roundtrip: LabelMap | None = None


def run_psi_sweep(cfg: ExperimentConfig, seeds: dict[str, int] | None = None,
                  model: Model | None = None) -> list[EditCohort]:
    """One cohort of ``edit_count`` perturbational edits per (seed, psi)."""
    model = model or build_model(cfg)
    seeds = seeds or {a: select_seed(model.ref_features, a) for a in cfg.archetypes}
    out = []
    for si, (name, idx) in enumerate(seeds.items()):
        seed_map = model.reference[idx]
        seed_lat = np.broadcast_to(model.latents[idx], (cfg.edit_count,) + model.latent_shape)
        h_seed = occupancy_heatmap([seed_map])
        for pi, psi in enumerate(cfg.psi_grid):
            rs = _run_seed(cfg, _STREAM_PSI, si * 1000 + pi)
            lat = generate_perturbed(model, np.ascontiguousarray(seed_lat), psi, rs,
                                     np.full(cfg.edit_count, idx))
            maps = decode_all(model, lat)
            prov = [Provenance(f"ref-{idx:04d}", "perturb", {"psi": psi}, (rs, k)) for k in range(len(maps))]
            rep = evaluate_cohort(maps, model.ref_features, k=cfg.k, ridge=cfg.ridge)
            diff, mask = heatmap_diff(h_seed, occupancy_heatmap(maps))
            out.append(EditCohort(name, idx, f"psi={psi:g}", Cohort(maps, prov), rep, diff, mask))
    return out


def mask_for(model: Model, seed_map: LabelMap, edit: str) -> np.ndarray:
    """Latent preserve-mask for editing ``edit`` ("LV", "RV", ... or "none")."""
    if edit == "none":
        spec = EditMaskSpec(frozenset(t for t in TissueId if t != TissueId.Background), model.cfg.dilation_rounds)
    else:
        spec = EditMaskSpec.editing([edit], model.cfg.dilation_rounds)
    return build_mask(seed_map, spec, model.codec).values


def run_mask_sweep(cfg: ExperimentConfig, seeds: dict[str, int] | None = None,
                   model: Model | None = None, edits: Sequence[str] | None = None) -> list[EditCohort]:
    """One cohort of ``mask_count`` localized edits per (seed, edited tissue)."""
    model = model or build_model(cfg)
    seeds = seeds or {a: select_seed(model.ref_features, a) for a in cfg.archetypes}
    edits = list(cfg.mask_edits if edits is None else edits)
    out = []
    for si, (name, idx) in enumerate(seeds.items()):
        seed_map = model.reference[idx]
        seed_rt = model.decode(model.latents[idx])
        h_seed = occupancy_heatmap([seed_map])
        for ei, edit in enumerate(edits):
            m = mask_for(model, seed_map, edit)
            n = cfg.mask_count
            lat_seed = np.ascontiguousarray(np.broadcast_to(model.latents[idx], (n,) + model.latent_shape))
            masks = np.broadcast_to(m, (n,) + m.shape)
            rs = _run_seed(cfg, _STREAM_MASK, si * 1000 + ei)
            lat = generate_local(model, lat_seed, masks, rs, np.full(n, idx))
            maps = decode_all(model, lat)
            prov = [Provenance(f"ref-{idx:04d}", "local", {"edit": edit}, (rs, k)) for k in range(n)]
            rep = evaluate_cohort(maps, model.ref_features, k=cfg.k, ridge=cfg.ridge)
            diff, mask = heatmap_diff(h_seed, occupancy_heatmap(maps))
            out.append(EditCohort(name, idx, f"edit={edit}", Cohort(maps, prov), rep, diff, mask, seed_rt))
    return out


@dataclass
class AugmentResult:
    threshold: float
    target: list[int]
    cohorts: dict[str, Cohort]
    reports: dict[str, CohortReport]
    generated: dict[str, int]


def _filter_fill(model: Model, want: int, make: Callable[[int, int], np.ndarray], threshold: float):
    """Generate rounds of candidates until ``want`` pass the RV filter or the budget ends."""
    budget = model.cfg.budget_factor * want
    kept, made, rnd = [], 0, 0
    while len(kept) < want and made < budget:
        batch = min(max(want, model.cfg.chunk), budget - made)
        lat = make(batch, rnd)
        for z in lat:
            m = model.decode(z)
            f = morph_features(m)
            if f[RV_VOLUME] >= threshold:
                kept.append((m, f))
                if len(kept) == want:
                    break
        made += batch
        rnd += 1
    if len(kept) < want:
        raise RuntimeError(f"filter yield {len(kept)}/{want} after {made} generations (budget {budget})")
    return [m for m, _ in kept], np.array([f for _, f in kept]), made


def run_augmentation(cfg: ExperimentConfig, model: Model | None = None,
                     strategies: Sequence[str] = ("unconditional", "perturbational", "localized")) -> AugmentResult:
    model = model or build_model(cfg)
    thr = model.threshold()
    rv = model.ref_features[:, RV_VOLUME]
    target = [int(i) for i in np.flatnonzero(rv >= thr)]
    if not target:
        raise ValueError(f"no reference member has RV volume >= {thr:.3f} ml")
    tgt_feats = model.ref_features[target]
    want = cfg.augment_size
    cohorts, reports, made_n = {}, {}, {}

    def seeds_for(count: int, rnd: int) -> np.ndarray:
        # seed twins cycle through the target cohort in index order
        return np.array([target[(rnd * count + j) % len(target)] for j in range(count)])

    def make_uncond(count, rnd):
        return generate_unconditional(model, count, _run_seed(cfg, _STREAM_AUG, 100 + rnd))

    def make_perturb(count, rnd):
        # alternate the two psi values so any prefix of the batch mixes both
        idx = seeds_for(count, rnd)
        parts = np.empty((count,) + model.latent_shape)
        for j, psi in enumerate((cfg.augment_psi[0], cfg.augment_psi[-1])):
            sel = np.arange(j, count, 2)
            if len(sel):
                parts[sel] = generate_perturbed(model, model.latents[idx[sel]], psi,
                                                _run_seed(cfg, _STREAM_AUG, 200 + 2 * rnd + j), idx[sel])
        return parts

    def make_local(count, rnd):
        idx = seeds_for(count, rnd)
        masks = np.stack([mask_for(model, model.reference[i], "LV" if j % 2 == 0 else "RV")
                          for j, i in enumerate(idx)])
        return generate_local(model, model.latents[idx], masks, _run_seed(cfg, _STREAM_AUG, 300 + rnd), idx)

    makers = {"unconditional": make_uncond, "perturbational": make_perturb, "localized": make_local}
    for name in strategies:
        maps, feats, made = _filter_fill(model, want, makers[name], thr)
        prov = [Provenance(None, name, {"threshold_ml": thr}, None) for _ in maps]
        cohorts[name] = Cohort(maps, prov)
        reports[name] = evaluate_cohort(maps, tgt_feats, norm_features=model.ref_features,
                                        k=cfg.k, ridge=cfg.ridge, features=feats)
        made_n[name] = made
        log.info("augment %s: %d kept of %d generated", name, len(maps), made)
    return AugmentResult(thr, target, cohorts, reports, made_n)


def run_sensitivity(cfg: ExperimentConfig, model: Model | None = None) -> list[dict]:
    """Cohort metrics over the steps grid (at ``cohort_size``) and size grid (at ``steps``)."""
    if not cfg.sens_steps and not cfg.sens_sizes:
        raise ValueError("sensitivity grids are empty")
    model = model or build_model(cfg)
    rows = []
    for j, steps in enumerate(cfg.sens_steps):
        m = model.with_steps(steps)
        lat = generate_unconditional(m, cfg.cohort_size, _run_seed(cfg, _STREAM_SENS, j))
        rep = evaluate_cohort(decode_all(m, lat), model.ref_features, k=cfg.k, ridge=cfg.ridge)
        rows.append({"sweep": "steps", "steps": steps, "size": cfg.cohort_size, **rep.summary()})
    big = max(cfg.sens_sizes, default=0)
    if big:
        lat = generate_unconditional(model, big, _run_seed(cfg, _STREAM_SENS, 999))
        maps = decode_all(model, lat)
        for size in cfg.sens_sizes:
            rep = evaluate_cohort(maps[:size], model.ref_features, k=cfg.k, ridge=cfg.ridge)
            rows.append({"sweep": "size", "steps": cfg.steps, "size": size, **rep.summary()})
    return rows


def binomial_underrep_pvalue(hits: int, n: int, weight: float) -> float:
    """One-sided exact binomial p-value for "occupancy < weight"."""
    return float(stats.binomtest(hits, n, weight, alternative="less").pvalue)


def two_proportion_pvalue(x1: int, n1: int, x2: int, n2: int) -> float:
    """Two-sided pooled two-proportion z-test."""
    p = (x1 + x2) / (n1 + n2)
    se = np.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if se == 0:
        return 1.0
    z = (x1 / n1 - x2 / n2) / se
    return float(2 * stats.norm.sf(abs(z)))
