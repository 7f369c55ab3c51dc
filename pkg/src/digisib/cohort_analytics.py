"""Cohort-vs-cohort metrics: improved precision/recall, Frechet distance, occupancy heatmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .anatomy_metrics import morph_features
from .core import Cohort, LabelMap, TissueId, onehot

RIDGE = 1e-6


@dataclass(frozen=True)
class FeatureCloud:
    """Morphology vectors normalized by a reference cohort's per-dimension mean/std."""

    rows: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


def normalizer(reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.atleast_2d(np.asarray(reference, float))
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    # constant dimensions would divide by zero; leave them unscaled
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


def feature_cloud(features: np.ndarray, reference: np.ndarray) -> FeatureCloud:
    """Normalize ``features`` with constants taken from ``reference`` only."""
    mu, sd = normalizer(reference)
    return FeatureCloud((np.asarray(features, float) - mu) / sd, mu, sd)


def cohort_features(cohort: Cohort | list[LabelMap]) -> np.ndarray:
    return np.array([morph_features(m) for m in cohort]).reshape(-1, 12)


def _rows(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x.rows if isinstance(x, FeatureCloud) else x, float))


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest neighbour in ``x`` (self excluded)."""
    d = cdist(x, x)
    return np.sort(d, axis=1)[:, k]


def coverage(points: np.ndarray, manifold: np.ndarray, k: int) -> float:
    """Fraction of ``points`` inside some k-NN ball of ``manifold``."""
    radii = knn_radii(manifold, k)
    d = cdist(points, manifold)
    return float(np.mean(np.any(d <= radii[None, :], axis=1)))


def precision_recall(real, synth, k: int = 3) -> tuple[float, float]:
    """Improved precision (synth inside real manifold) and recall (real inside synth manifold)."""
    r, s = _rows(real), _rows(synth)
    if len(r) <= k or len(s) <= k:
        raise ValueError(f"both clouds need more than k={k} members (got {len(r)}, {len(s)})")
    return coverage(s, r, k), coverage(r, s, k)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fit_moments(x, ridge: float = RIDGE) -> tuple[np.ndarray, np.ndarray]:
    x = _rows(x)
    if len(x) < x.shape[1] + 1:
        raise ValueError(f"need at least dim+1={x.shape[1] + 1} members, got {len(x)}")
    cov = np.atleast_2d(np.cov(x, rowvar=False)) + ridge * np.eye(x.shape[1])
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("degenerate covariance after ridge")
    return x.mean(axis=0), cov


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(A + B - 2 (A^1/2 B A^1/2)^1/2)`` (squared Frechet distance)."""
    ra = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(ra @ cov_b @ ra)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def frechet_distance(a, b, ridge: float = RIDGE) -> float:
    return frechet_from_moments(*fit_moments(a, ridge), *fit_moments(b, ridge))


@dataclass(frozen=True)
class Heatmap:
    """Per-channel mean occupancy ``P`` with shape ``(7, nx, ny, nz)``."""

    P: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return 1.0 - self.P[TissueId.Background]


def occupancy_heatmap(cohort: Cohort | list[LabelMap]) -> Heatmap:
    members = list(cohort)
    if not members:
        raise ValueError("cohort is empty")
    acc = np.zeros_like(onehot(members[0]))
    for m in members:
        acc += onehot(m)
    return Heatmap(acc / len(members))


def heatmap_diff(a: Heatmap, b: Heatmap, per_channel: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Signed difference of foreground occupancy ``a - b`` and a mask of cells to hide.

    The mask is set where either side has zero foreground occupancy. With
    ``per_channel`` the difference is returned for all 7 channels instead.
    """
    if a.P.shape != b.P.shape:
        raise ValueError(f"heatmap dims differ: {a.P.shape} vs {b.P.shape}")
    fa, fb = a.foreground, b.foreground
    mask = (fa <= 0) | (fb <= 0)
    diff = (a.P - b.P) if per_channel else (fa - fb)
    return diff, mask
