"""Displacement-field algebra: affine rasterisation, warping, composition,
and Jacobian-determinant diagnostics.

Displacements are stored in voxel units on the fixed grid: a sample point x
maps to x + u(x). All interpolation clamps to the volume edge, consistent
with the rest of the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridMeta, require_same_grid
from .interp import identity_coords, sample_trilinear
from .volume import LabelMask, Volume


@dataclass(frozen=True)
class AffineParams:
    """12-DOF affine transform on voxel coordinates: x maps to A x + t."""

    matrix: np.ndarray  # (3, 4) = [A | t]

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"affine matrix must be (3,4), got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("affine matrix contains non-finite entries")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def A(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.matrix[:, 3]

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @classmethod
    def from_vector(cls, v) -> "AffineParams":
        return cls(np.asarray(v, dtype=np.float64).reshape(3, 4))

    def as_vector(self) -> np.ndarray:
        return self.matrix.ravel().copy()


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors u(x) on a grid, shape dims + (3,)."""

    grid: GridMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != self.grid.dims + (3,):
            raise ValueError(f"field shape {arr.shape} != dims {self.grid.dims} + (3,)")
        if not np.isfinite(arr).all():
            raise ValueError("displacement field contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def zero(cls, grid: GridMeta) -> "DisplacementField":
        return cls(grid, np.zeros(grid.dims + (3,)))

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.data**2, axis=-1))))


@dataclass(frozen=True)
class ScalarField:
    """Per-voxel scalar values on a grid (Jacobian determinants, gradients)."""

    grid: GridMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != self.grid.dims:
            raise ValueError(f"scalar field shape {arr.shape} != dims {self.grid.dims}")
        if not np.isfinite(arr).all():
            raise ValueError("scalar field contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)


def affine_to_field(a: AffineParams, grid: GridMeta) -> DisplacementField:
    """Rasterise affine parameters: u(x) = (A x + t) - x at each voxel index."""
    coords = identity_coords(grid.dims)
    u = coords @ (a.A - np.eye(3)).T + a.t
    return DisplacementField(grid, u)


def warp(v: Volume | LabelMask, phi: DisplacementField):
    """Resample v at x + u(x); returns the same concrete type as v."""
    require_same_grid(v, phi, "volume and field")
    pts = identity_coords(v.grid.dims) + phi.data
    out = sample_trilinear(v.data, pts)
    if isinstance(v, LabelMask):
        np.clip(out, 0.0, 1.0, out=out)
    return v.with_data(out)


def compose(phi_prev: DisplacementField, phi_n: DisplacementField) -> DisplacementField:
    """Composite field: out(x) = phi_prev(x + phi_n(x)) + phi_n(x)."""
    require_same_grid(phi_prev, phi_n, "fields")
    pts = identity_coords(phi_prev.grid.dims) + phi_n.data
    out = np.empty_like(phi_n.data)
    for c in range(3):
        out[..., c] = sample_trilinear(phi_prev.data[..., c], pts) + phi_n.data[..., c]
    return DisplacementField(phi_prev.grid, out)


def _displacement_jacobian(u: np.ndarray) -> np.ndarray:
    """(n0,n1,n2,3,3) array J[..., j, i] = d u_j / d x_i by finite differences."""
    grads = np.empty(u.shape[:3] + (3, 3))
    for j in range(3):
        gx, gy, gz = np.gradient(u[..., j], edge_order=1)
        grads[..., j, 0] = gx
        grads[..., j, 1] = gy
        grads[..., j, 2] = gz
    return grads


def jacobian_determinant(phi: DisplacementField) -> ScalarField:
    """det(I + grad u), central differences inside, one-sided at boundaries."""
    if any(d < 3 for d in phi.grid.dims):
        raise ValueError(f"jacobian needs dims >= 3 per axis, got {phi.grid.dims}")
    g = _displacement_jacobian(phi.data)
    for c in range(3):
        g[..., c, c] += 1.0
    det = (
        g[..., 0, 0] * (g[..., 1, 1] * g[..., 2, 2] - g[..., 1, 2] * g[..., 2, 1])
        - g[..., 0, 1] * (g[..., 1, 0] * g[..., 2, 2] - g[..., 1, 2] * g[..., 2, 0])
        + g[..., 0, 2] * (g[..., 1, 0] * g[..., 2, 1] - g[..., 1, 1] * g[..., 2, 0])
    )
    return ScalarField(phi.grid, det)


def fraction_negative_jacobian(phi: DisplacementField) -> float:
    """Fraction of voxels whose transform Jacobian determinant is negative."""
    det = jacobian_determinant(phi).data
    return float(np.count_nonzero(det < 0.0) / det.size)


def spatial_gradient(v: Volume) -> tuple[ScalarField, ScalarField, ScalarField]:
    """d v / d x_i per axis (voxel units), central inside, one-sided at edges."""
    if any(d < 2 for d in v.grid.dims):
        raise ValueError(f"gradient needs dims >= 2 per axis, got {v.grid.dims}")
    gx, gy, gz = np.gradient(v.data, edge_order=1)
    return (
        ScalarField(v.grid, gx),
        ScalarField(v.grid, gy),
        ScalarField(v.grid, gz),
    )


def save_field(phi: DisplacementField, path_base) -> tuple[Path, Path]:
    """Write a field as a little-endian float32 blob plus a JSON grid sidecar.

    Layout: C-order array of shape dims + (3,), i.e. the three displacement
    components of a voxel are adjacent.
    """
    base = Path(path_base)
    blob = base.with_suffix(".f32")
    meta = base.with_suffix(".json")
    blob.write_bytes(phi.data.astype("<f4").tobytes(order="C"))
    meta.write_text(
        json.dumps(
            {
                "dims": list(phi.grid.dims),
                "spacing": list(phi.grid.spacing),
                "origin": list(phi.grid.origin),
                "dtype": "<f4",
                "layout": "dims+(3,) C-order",
            },
            indent=2,
        )
        + "\n"
    )
    return blob, meta


def load_field(path_base) -> DisplacementField:
    base = Path(path_base)
    meta = json.loads(base.with_suffix(".json").read_text())
    dims = tuple(int(d) for d in meta["dims"])
    raw = np.frombuffer(base.with_suffix(".f32").read_bytes(), dtype="<f4")
    data = raw.astype(np.float64).reshape(dims + (3,))
    return DisplacementField(GridMeta(dims, meta["spacing"], meta["origin"]), data)
