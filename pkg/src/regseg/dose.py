"""Voxel-wise dose accumulation over deformation chains and DVH constraint checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import DeformationField, compose, warp_trilinear
from .metrics import OrganMask
from .tensor import Tensor


@dataclass
class DoseGrid:
    """Dose in Gy on a (D, H, W) grid with spacing (sx, sy, sz) mm."""

    dose: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.dose = np.asarray(self.dose, dtype=np.float64)
        if not np.all(np.isfinite(self.dose)):
            raise ValueError("DoseGrid: non-finite dose values")
        if np.any(self.dose < 0):
            raise ValueError("DoseGrid: negative dose")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"DoseGrid: spacing must be positive, got {self.spacing_mm}")


@dataclass
class ConstraintSet:
    """Institutional GI OAR dose limits in Gy."""

    d_0035_max: float = 33.0
    d_5cc_max: float = 25.0
    d_5cc_max_large_bowel: float = 30.0

    def __post_init__(self):
        if min(self.d_0035_max, self.d_5cc_max, self.d_5cc_max_large_bowel) <= 0:
            raise ValueError("ConstraintSet: limits must be positive")


def accumulate(doses, dvfs, reference_index: int = 0) -> DoseGrid:
    """Warp every fraction dose into the reference frame and sum voxelwise.

    ``dvfs[i]`` is the sequential field between fractions i and i+1, oriented
    away from the reference: for i >= reference_index it maps frame-i
    coordinates into frame i+1 (the field produced by registering fraction
    i+1 as moving onto fraction i as fixed), and for i < reference_index it
    maps frame i+1 into frame i. The chain for fraction j is composed from
    the fields between j and the reference and applied by trilinear pull-back.
    """
    doses = list(doses)
    dvfs = list(dvfs)
    if not doses:
        raise ValueError("accumulate: no dose grids")
    if len(dvfs) != len(doses) - 1:
        raise ValueError(f"accumulate: {len(doses)} doses need {len(doses) - 1} fields, got {len(dvfs)}")
    if not 0 <= reference_index < len(doses):
        raise ValueError(f"accumulate: reference index {reference_index} out of range")
    shape = doses[0].dose.shape
    spacing = doses[0].spacing_mm
    for d in doses:
        if d.dose.shape != shape:
            raise ValueError(f"accumulate: grid mismatch {d.dose.shape} vs {shape}")
    for f in dvfs:
        if f.grid_shape != shape:
            raise ValueError(f"accumulate: field grid {f.grid_shape} vs dose grid {shape}")

    total = np.zeros(shape)
    with T.no_grad():
        for j, d in enumerate(doses):
            if j == reference_index:
                total += d.dose
                continue
            if j > reference_index:
                chain = dvfs[reference_index]
                for i in range(reference_index + 1, j):
                    chain = compose(dvfs[i], chain)
            else:
                chain = dvfs[reference_index - 1]
                for i in range(reference_index - 2, j - 1, -1):
                    chain = compose(dvfs[i], chain)
            warped = warp_trilinear(Tensor(d.dose[None]), chain)
            total += warped.data[0]
    return DoseGrid(total, spacing)


def dose_metrics(dose: DoseGrid, mask: OrganMask) -> tuple[float, float, float]:
    """(Dmax, D_0.035cc, D_5cc) in Gy for one organ.

    DVH points come from the descending-sorted organ voxel doses: with
    uniform voxel volume vv, the cumulative-volume curve passes through
    (k*vv, k-th hottest dose); D_V interpolates linearly between those
    points and clamps to the hottest voxel for V <= vv.
    """
    m = mask.mask
    if dose.dose.shape != m.shape:
        raise ValueError(f"dose_metrics: dose {dose.dose.shape} vs mask {m.shape}")
    if not m.any():
        raise ValueError("dose_metrics: empty mask")
    voxel_cc = float(np.prod(dose.spacing_mm)) / 1000.0  # mm^3 -> cm^3
    organ = np.sort(dose.dose[m])[::-1]
    cumvol = voxel_cc * np.arange(1, organ.size + 1)
    total = cumvol[-1]

    def d_at(v_cc: float) -> float:
        if v_cc > total:
            raise ValueError(
                f"dose_metrics: organ volume {total:.4f} cm^3 smaller than DVH point {v_cc} cm^3"
            )
        return float(np.interp(v_cc, cumvol, organ))

    dmax = float(organ[0])
    return dmax, d_at(0.035), d_at(5.0)


def check_constraints(metrics, organ: str, constraints: ConstraintSet | None = None) -> list[dict]:
    """Violations of the D_0.035cc and D_5cc limits for one organ.

    ``metrics`` is the (Dmax, D_0.035cc, D_5cc) triple; large bowel gets the
    relaxed D_5cc limit. The Dmax-or-D_0.035cc constraint is checked on
    D_0.035cc, the quantity reported clinically.
    """
    if constraints is None:
        constraints = ConstraintSet()
    _, d0035, d5 = metrics
    d5_limit = constraints.d_5cc_max_large_bowel if organ == "large_bowel" else constraints.d_5cc_max
    violations = []
    if d0035 > constraints.d_0035_max:
        violations.append(
            {"organ": organ, "metric": "D_0.035cc", "value": float(d0035), "limit": constraints.d_0035_max}
        )
    if d5 > d5_limit:
        violations.append({"organ": organ, "metric": "D_5cc", "value": float(d5), "limit": d5_limit})
    return violations
