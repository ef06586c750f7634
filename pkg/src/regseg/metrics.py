"""Segmentation and registration evaluation metrics, plus label-map fusion.

Masks carry their voxel spacing in mm; distance metrics work on physical
coordinates (voxel index times per-axis spacing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree


@dataclass
class OrganMask:
    """Binary voxel mask with spacing (sx, sy, sz) mm for the (W, H, D) axes."""

    mask: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"OrganMask: spacing must be positive, got {self.spacing_mm}")

    @property
    def voxel_count(self) -> int:
        return int(np.count_nonzero(self.mask))


def _as_mask(m) -> np.ndarray:
    return m.mask if isinstance(m, OrganMask) else np.asarray(m).astype(bool)


def dsc(a, b) -> float:
    """Dice similarity 2|A.B| / (|A| + |B|); two empty masks score 1.0."""
    am, bm = _as_mask(a), _as_mask(b)
    if am.shape != bm.shape:
        raise ValueError(f"dsc: shape mismatch {am.shape} vs {bm.shape}")
    na, nb = np.count_nonzero(am), np.count_nonzero(bm)
    if na + nb == 0:
        return 1.0
    return 2.0 * np.count_nonzero(am & bm) / (na + nb)


def _boundary(mask: np.ndarray) -> np.ndarray:
    # 6-connectivity: a mask voxel with any face neighbor outside the mask
    # (grid edges count as outside).
    struct = generate_binary_structure(3, 1)
    return mask & ~binary_erosion(mask, structure=struct, border_value=0)


def _nearest_rank_p95(values: np.ndarray) -> float:
    values = np.sort(values)
    rank = int(np.ceil(0.95 * values.size))
    return float(values[max(rank, 1) - 1])


def hd95(a: OrganMask, b: OrganMask) -> float:
    """Symmetric 95th-percentile boundary distance in mm.

    Boundaries use 6-connectivity; each directed distance set holds, for
    every boundary voxel of one mask, the distance to the nearest boundary
    voxel of the other; percentiles are nearest-rank.
    """
    am, bm = _as_mask(a), _as_mask(b)
    if am.shape != bm.shape:
        raise ValueError(f"hd95: shape mismatch {am.shape} vs {bm.shape}")
    if not am.any() or not bm.any():
        raise ValueError("undefined HD95: empty mask")
    sp_a = a.spacing_mm if isinstance(a, OrganMask) else (1.0, 1.0, 1.0)
    # index order is (z, y, x) -> scale by (sz, sy, sx)
    scale = np.array([sp_a[2], sp_a[1], sp_a[0]])
    pa = np.argwhere(_boundary(am)) * scale
    pb = np.argwhere(_boundary(bm)) * scale
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return max(_nearest_rank_p95(d_ab), _nearest_rank_p95(d_ba))


def cv_dsc(per_case_dsc, population_mean: float) -> float:
    """100 * std(values, ddof=1) / population mean DSC, in percent."""
    values = np.asarray(per_case_dsc, dtype=float)
    if values.size < 2:
        raise ValueError(f"cv_dsc: need >= 2 values, got {values.size}")
    if population_mean == 0:
        raise ValueError("cv_dsc: zero population mean")
    return float(100.0 * values.std(ddof=1) / population_mean)


def organ_displacement(phi, mask: OrganMask) -> tuple[float, float, float]:
    """Median absolute displacement (|ux|, |uy|, |uz|) in mm over mask voxels."""
    u = phi.u.data if hasattr(phi, "u") else np.asarray(phi)
    m = _as_mask(mask)
    if u.shape[1:] != m.shape:
        raise ValueError(f"organ_displacement: field {u.shape} vs mask {m.shape}")
    if not m.any():
        raise ValueError("organ_displacement: empty mask")
    sp = mask.spacing_mm
    return tuple(float(np.median(np.abs(u[c][m])) * sp[c]) for c in range(3))


def displacement_cv(per_patient_displacements) -> dict:
    """Per-patient CV (percent) of displacement per axis, with cohort stats.

    Input maps patient id to a sequence of (dx, dy, dz) displacements, one
    per source alignment; at least two per patient. Returns per-patient CVs
    plus their mean and standard deviation across patients.
    """
    per_patient = {}
    for pid, rows in per_patient_displacements.items():
        arr = np.asarray(rows, dtype=float).reshape(-1, 3)
        if arr.shape[0] < 2:
            raise ValueError(f"displacement_cv: patient {pid} has < 2 source alignments")
        mean = arr.mean(axis=0)
        if np.any(mean == 0):
            raise ValueError(f"displacement_cv: zero mean displacement for patient {pid}")
        per_patient[pid] = tuple(100.0 * arr[:, c].std(ddof=1) / mean[c] for c in range(3))
    stacked = np.array(list(per_patient.values()))
    return {
        "per_patient": per_patient,
        "mean": tuple(stacked.mean(axis=0)),
        "std": tuple(stacked.std(ddof=1, axis=0)) if stacked.shape[0] > 1 else (0.0, 0.0, 0.0),
    }


def majority_vote(label_maps) -> np.ndarray:
    """Per-voxel most frequent label over >= 3 maps; ties pick the lowest label."""
    maps = [np.asarray(m) for m in label_maps]
    if len(maps) < 3:
        raise ValueError(f"majority_vote requires >=3 label maps, got {len(maps)}")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError(f"majority_vote: shape mismatch {[m.shape for m in maps]}")
    n_classes = int(max(m.max(initial=0) for m in maps)) + 1
    counts = np.zeros((n_classes,) + shape, dtype=np.int32)
    for m in maps:
        for c in range(n_classes):
            counts[c] += m == c
    return counts.argmax(axis=0).astype(np.uint8)


def make_record(patient: str, fraction, organ: str, metric: str, value: float) -> dict:
    """One JSONL metrics record."""
    return {
        "patient": patient,
        "fraction": fraction,
        "organ": organ,
        "metric": metric,
        "value": float(value),
    }
