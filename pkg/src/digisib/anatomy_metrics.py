"""Per-anatomy morphology vectors and the 12-check topology validator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import CHAMBERS, Cohort, LabelMap, TissueId

T = TissueId

COUNT_CHECKS = (T.Myo, T.LV, T.RV, T.LA, T.RA)
REQUIRED_ADJ = ((T.LV, T.Ao), (T.LV, T.Myo), (T.LV, T.LA), (T.RV, T.Myo), (T.RV, T.RA))
FORBIDDEN_ADJ = ((T.LV, T.RV), (T.LA, T.RA))

CHECK_NAMES = (
    [f"cc_{t.name}" for t in COUNT_CHECKS]
    + [f"adj_{a.name}_{b.name}" for a, b in REQUIRED_ADJ]
    + [f"noadj_{a.name}_{b.name}" for a, b in FORBIDDEN_ADJ]
)

MORPH_NAMES = [f"{t.name}_{q}" for t in CHAMBERS for q in ("volume_ml", "major_mm", "minor_mm")]

_STRUCT = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


@dataclass
class TopologyReport:
    checks: dict[str, bool]
    components: dict[str, list[int]] = field(default_factory=dict)

    @property
    def violation_count(self) -> int:
        return sum(not ok for ok in self.checks.values())

    @property
    def failed(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]

    def as_row(self) -> dict[str, int]:
        return {k: int(v) for k, v in self.checks.items()}


def morph_features(lmap: LabelMap) -> np.ndarray:
    """12-vector of (volume ml, major mm, minor mm) for LV, RV, LA, RA.

    Axis lengths use the solid-ellipsoid convention: an ellipsoid with semi-axis
    ``a`` has coordinate variance ``a^2/5`` along that axis, so the full length is
    ``2a = sqrt(20 * variance)``. Absent tissues contribute zeros.
    """
    out = np.zeros(12)
    vs = lmap.voxel_size
    for k, t in enumerate(CHAMBERS):
        coords = np.argwhere(lmap.labels == t)
        n = len(coords)
        if n == 0:
            continue
        out[3 * k] = n * lmap.voxel_volume_ml
        if n > 1:
            c = coords * vs
            cov = np.cov(c, rowvar=False, bias=True)
            ev = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
            out[3 * k + 1] = np.sqrt(20.0 * ev[-1])
            out[3 * k + 2] = np.sqrt(20.0 * ev[0])
    return out


def component_sizes(mask: np.ndarray, connectivity: int = 26) -> list[int]:
    lab, n = ndimage.label(mask, structure=_STRUCT[connectivity])
    if n == 0:
        return []
    return sorted((np.bincount(lab.ravel())[1:]).tolist(), reverse=True)


def adjacent(labels: np.ndarray, a: int, b: int, connectivity: int = 6) -> bool:
    """True if some voxel of ``a`` has a voxel of ``b`` in its neighbourhood."""
    ma = labels == a
    if not ma.any():
        return False
    grown = ndimage.binary_dilation(ma, structure=_STRUCT[connectivity])
    return bool(np.any(grown & (labels == b)))


def check_topology(lmap: LabelMap, component_connectivity: int = 26,
                   adjacency_connectivity: int = 6) -> TopologyReport:
    lab = lmap.labels
    checks: dict[str, bool] = {}
    comps: dict[str, list[int]] = {}
    for t in COUNT_CHECKS:
        sizes = component_sizes(lab == t, component_connectivity)
        comps[t.name] = sizes
        checks[f"cc_{t.name}"] = len(sizes) == 1
    for a, b in REQUIRED_ADJ:
        checks[f"adj_{a.name}_{b.name}"] = adjacent(lab, a, b, adjacency_connectivity)
    for a, b in FORBIDDEN_ADJ:
        checks[f"noadj_{a.name}_{b.name}"] = not adjacent(lab, a, b, adjacency_connectivity)
    return TopologyReport(checks, comps)


def violating_components(lmap: LabelMap, tissue: TissueId, connectivity: int = 26) -> list[np.ndarray]:
    """Voxel coordinates of every component of ``tissue`` except the largest.

    Diagnostic for multi-component violations: these are the voxels a repair
    would have to remove or reconnect.
    """
    lab, n = ndimage.label(lmap.labels == tissue, structure=_STRUCT[connectivity])
    if n <= 1:
        return []
    sizes = np.bincount(lab.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return [np.argwhere(lab == i) for i in range(1, n + 1) if i != keep]


def cohort_violation_rate(cohort: Cohort | list[LabelMap], per: str = "check") -> float:
    """Percentage of failed checks over ``12 * len(cohort)`` (``per="check"``),
    or percentage of maps with at least one failure (``per="map"``)."""
    members = list(cohort)
    if not members:
        raise ValueError("cohort is empty")
    counts = [check_topology(m).violation_count for m in members]
    if per == "check":
        return 100.0 * sum(counts) / (len(CHECK_NAMES) * len(members))
    if per == "map":
        return 100.0 * sum(c > 0 for c in counts) / len(members)
    raise ValueError(f"per must be 'check' or 'map', got {per!r}")
