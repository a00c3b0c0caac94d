"""Reference trilinear interpolation in plain numpy.

Sampling convention used across the package: query coordinates are in voxel
units on the array's own index grid, and out-of-range coordinates are clamped
to the edge (border replication). The numba kernels in ``_kernels`` implement
the same convention for the hot paths; these implementations stay around as
the slow, obviously-correct reference.
"""

from __future__ import annotations

import numpy as np


def sample_trilinear(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a 3-D array at fractional voxel coordinates.

    Args:
        data: (n0, n1, n2) array.
        pts: (..., 3) query coordinates in voxel units.

    Returns:
        Array of shape pts.shape[:-1] with interpolated values.
    """
    n0, n1, n2 = data.shape
    x = np.clip(pts[..., 0], 0.0, n0 - 1.0)
    y = np.clip(pts[..., 1], 0.0, n1 - 1.0)
    z = np.clip(pts[..., 2], 0.0, n2 - 1.0)
    i0 = np.minimum(np.floor(x).astype(np.intp), n0 - 2) if n0 > 1 else np.zeros(x.shape, np.intp)
    j0 = np.minimum(np.floor(y).astype(np.intp), n1 - 2) if n1 > 1 else np.zeros(y.shape, np.intp)
    k0 = np.minimum(np.floor(z).astype(np.intp), n2 - 2) if n2 > 1 else np.zeros(z.shape, np.intp)
    i1 = np.minimum(i0 + 1, n0 - 1)
    j1 = np.minimum(j0 + 1, n1 - 1)
    k1 = np.minimum(k0 + 1, n2 - 1)
    fx = x - i0
    fy = y - j0
    fz = z - k0

    c000 = data[i0, j0, k0]
    c001 = data[i0, j0, k1]
    c010 = data[i0, j1, k0]
    c011 = data[i0, j1, k1]
    c100 = data[i1, j0, k0]
    c101 = data[i1, j0, k1]
    c110 = data[i1, j1, k0]
    c111 = data[i1, j1, k1]

    # Two-sided lerp is exact at integer coordinates (f = 0 or 1), which the
    # zero-field warp identity relies on.
    c00 = (1.0 - fz) * c000 + fz * c001
    c01 = (1.0 - fz) * c010 + fz * c011
    c10 = (1.0 - fz) * c100 + fz * c101
    c11 = (1.0 - fz) * c110 + fz * c111
    c0 = (1.0 - fy) * c00 + fy * c01
    c1 = (1.0 - fy) * c10 + fy * c11
    return (1.0 - fx) * c0 + fx * c1


def sample_trilinear_with_grad(data: np.ndarray, pts: np.ndarray):
    """Sample and return the exact derivative of the sampled value wrt the query point.

    The derivative is the piecewise-constant-per-cell slope of the trilinear
    interpolant; it is zero in any axis whose coordinate is clamped. This is
    the true Jacobian of :func:`sample_trilinear`, which is what gradient
    checks against finite differences require.
    """
    n0, n1, n2 = data.shape
    x = pts[..., 0]
    y = pts[..., 1]
    z = pts[..., 2]
    inx = (x > 0.0) & (x < n0 - 1.0)
    iny = (y > 0.0) & (y < n1 - 1.0)
    inz = (z > 0.0) & (z < n2 - 1.0)
    x = np.clip(x, 0.0, n0 - 1.0)
    y = np.clip(y, 0.0, n1 - 1.0)
    z = np.clip(z, 0.0, n2 - 1.0)
    i0 = np.minimum(np.floor(x).astype(np.intp), n0 - 2) if n0 > 1 else np.zeros(x.shape, np.intp)
    j0 = np.minimum(np.floor(y).astype(np.intp), n1 - 2) if n1 > 1 else np.zeros(y.shape, np.intp)
    k0 = np.minimum(np.floor(z).astype(np.intp), n2 - 2) if n2 > 1 else np.zeros(z.shape, np.intp)
    i1 = np.minimum(i0 + 1, n0 - 1)
    j1 = np.minimum(j0 + 1, n1 - 1)
    k1 = np.minimum(k0 + 1, n2 - 1)
    fx = x - i0
    fy = y - j0
    fz = z - k0

    c000 = data[i0, j0, k0]
    c001 = data[i0, j0, k1]
    c010 = data[i0, j1, k0]
    c011 = data[i0, j1, k1]
    c100 = data[i1, j0, k0]
    c101 = data[i1, j0, k1]
    c110 = data[i1, j1, k0]
    c111 = data[i1, j1, k1]

    c00 = c000 + fz * (c001 - c000)
    c01 = c010 + fz * (c011 - c010)
    c10 = c100 + fz * (c101 - c100)
    c11 = c110 + fz * (c111 - c110)
    c0 = c00 + fy * (c01 - c00)
    c1 = c10 + fy * (c11 - c10)
    val = c0 + fx * (c1 - c0)

    gx = np.where(inx, c1 - c0, 0.0)
    gy = np.where(iny, (c01 - c00) + fx * ((c11 - c10) - (c01 - c00)), 0.0)
    d0 = (c001 - c000) + fy * ((c011 - c010) - (c001 - c000))
    d1 = (c101 - c100) + fy * ((c111 - c110) - (c101 - c100))
    gz = np.where(inz, d0 + fx * (d1 - d0), 0.0)
    grad = np.stack([gx, gy, gz], axis=-1)
    return val, grad


def identity_coords(dims) -> np.ndarray:
    """(n0, n1, n2, 3) array of voxel index coordinates."""
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    return np.stack([ii, jj, kk], axis=-1)
