"""Velocity-field integration, deformation composition, warping and topology checks.

A deformation phi = I + u is stored as its displacement u, a (3, D, H, W)
tensor in voxel units. Channel 0 displaces along x (the W axis), channel 1
along y (H), channel 2 along z (D). Warping uses pull-back sampling:
out(p) = img(p + u(p)), with out-of-range positions clamped to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .tensor import Tensor


@dataclass
class VelocityField:
    """Stationary velocity field v, (3, D, H, W), voxel units."""

    v: Tensor

    def __post_init__(self):
        if self.v.ndim != 4 or self.v.shape[0] != 3:
            raise ValueError(f"VelocityField: expected (3, D, H, W), got {self.v.shape}")


@dataclass
class DeformationField:
    """Displacement u of the transform phi = I + u, (3, D, H, W), voxel units."""

    u: Tensor

    def __post_init__(self):
        if self.u.ndim != 4 or self.u.shape[0] != 3:
            raise ValueError(f"DeformationField: expected (3, D, H, W), got {self.u.shape}")

    @property
    def grid_shape(self):
        return self.u.shape[1:]

    @classmethod
    def identity(cls, spatial) -> "DeformationField":
        return cls(Tensor.zeros((3,) + tuple(spatial)))


def warp_trilinear(img: Tensor, phi: DeformationField | Tensor) -> Tensor:
    """Trilinear pull-back of a (C, D, H, W) image through phi = I + u.

    Differentiable in both the image and the displacement; positions that
    fall outside the grid sample the clamped border value (and contribute
    zero displacement gradient there, where the clamp is flat).
    """
    u = phi.u if isinstance(phi, DeformationField) else phi
    if img.ndim != 4:
        raise ValueError(f"warp_trilinear: expected CDHW image, got {img.shape}")
    if u.ndim != 4 or u.shape[0] != 3 or u.shape[1:] != img.shape[1:]:
        raise ValueError(f"warp_trilinear: field {u.shape} does not match image {img.shape}")
    out = np.empty_like(img.data)
    _kernels.warp_fwd(img.data, u.data, out)

    img_data, u_data = img.data, u.data
    need_img, need_u = img.tracked(), u.tracked()

    def bwd(g):
        g = np.ascontiguousarray(g)
        gimg = gu = None
        if need_img:
            gimg = np.zeros_like(img_data)
            _kernels.warp_grad_img(u_data, g, gimg)
        if need_u:
            gu = np.empty_like(u_data)
            _kernels.warp_grad_u(img_data, u_data, g, gu)
        return gimg, gu

    return T.make_op("warp_trilinear", out, (img, u), bwd)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """(phi_a o phi_b)(p) = phi_a(phi_b(p)): u = u_b + resample(u_a at p + u_b)."""
    if outer.grid_shape != inner.grid_shape:
        raise ValueError(f"compose: grids differ, {outer.grid_shape} vs {inner.grid_shape}")
    return DeformationField(T.add(inner.u, warp_trilinear(outer.u, inner)))


def integrate_svf(v: VelocityField | Tensor, squaring_steps: int = 7) -> DeformationField:
    """exp(v) by scaling and squaring: u <- v / 2^s, then s self-compositions."""
    vt = v.v if isinstance(v, VelocityField) else v
    if squaring_steps < 1:
        raise ValueError(f"integrate_svf: squaring_steps must be >= 1, got {squaring_steps}")
    phi = DeformationField(T.scale(vt, 1.0 / (2 ** squaring_steps)))
    for _ in range(squaring_steps):
        phi = compose(phi, phi)
    return phi


def warp_labels(labels: np.ndarray, phi: DeformationField, n_classes: int) -> np.ndarray:
    """Warp an integer label map: one-hot, trilinear warp, per-voxel argmax.

    Ties resolve to the lowest class index. Not recorded on the tape; the
    differentiable path through contours uses warp_trilinear on one-hot
    tensors directly.
    """
    labels = np.asarray(labels)
    if labels.max(initial=0) >= n_classes:
        raise ValueError(f"warp_labels: label {int(labels.max())} >= n_classes {n_classes}")
    onehot = one_hot(labels, n_classes)
    out = np.empty_like(onehot)
    _kernels.warp_fwd(onehot, (phi.u if isinstance(phi, DeformationField) else phi).data, out)
    return out.argmax(axis=0).astype(np.uint8)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(C, D, H, W) float64 one-hot encoding of an integer label volume."""
    labels = np.asarray(labels)
    out = np.zeros((n_classes,) + labels.shape)
    for c in range(n_classes):
        out[c] = labels == c
    return out


def jacobian_stats(phi: DeformationField) -> tuple[float, float]:
    """(j_sd, folding_fraction) of det J(I + u) over interior voxels.

    Central differences in voxel units; j_sd is the population standard
    deviation of the determinant and folding_fraction the percentage of
    interior voxels with det <= 0.
    """
    u = phi.u.data if isinstance(phi, DeformationField) else np.asarray(phi)
    if any(s < 3 for s in u.shape[1:]):
        raise ValueError(f"jacobian_stats: grid {u.shape[1:]} must be >= 3 per axis")
    # channel c displaces along spatial axis (3 - c) of the (3, D, H, W) array
    axis_of = {0: 3, 1: 2, 2: 1}
    interior = (slice(None), slice(1, -1), slice(1, -1), slice(1, -1))

    def d(comp: int, direction: int) -> np.ndarray:
        ax = axis_of[direction]
        lead = [slice(1, -1)] * 3
        lag = [slice(1, -1)] * 3
        lead[ax - 1] = slice(2, None)
        lag[ax - 1] = slice(None, -2)
        grad = 0.5 * (u[comp][tuple(lead)] - u[comp][tuple(lag)])
        if comp == direction:
            grad = grad + 1.0
        return grad

    j = [[d(c, a) for a in range(3)] for c in range(3)]
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )
    j_sd = float(det.std())
    folding = float(100.0 * np.count_nonzero(det <= 0.0) / det.size)
    return j_sd, folding
