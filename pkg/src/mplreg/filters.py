"""Separable Gaussian filtering with clamp-to-edge borders, plus its adjoint.

The kernel is the sampled isotropic Gaussian truncated at radius ceil(3*sigma)
and renormalised to sum 1; sigma = 0 degenerates to the identity (delta
kernel). Filtering replicates the border voxel outward, which matches the
interpolation boundary rule used everywhere else in the package.

Border replication makes the operator *not* self-adjoint, so the exact
transpose needed by loss gradients is provided separately: it is a zero-padded
correlation plus a rank-one correction on each boundary plane (the mass that
forward filtering pulled from the replicated edge has to flow back onto it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class GaussianKernel:
    """1-D discrete Gaussian: radius ceil(3*sigma), weights normalised to 1."""

    sigma: float
    radius: int
    weights: np.ndarray

    @classmethod
    def make(cls, sigma: float) -> "GaussianKernel":
        sigma = float(sigma)
        if sigma < 0 or not np.isfinite(sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
        if sigma == 0.0:
            w = np.ones(1, dtype=np.float64)
            return cls(sigma, 0, w)
        radius = int(np.ceil(3.0 * sigma))
        t = np.arange(-radius, radius + 1, dtype=np.float64)
        w = np.exp(-(t * t) / (2.0 * sigma * sigma))
        w /= w.sum()
        w.flags.writeable = False
        return cls(sigma, radius, w)


_KERNEL_CACHE: dict[float, GaussianKernel] = {}


def get_kernel(sigma: float) -> GaussianKernel:
    sigma = float(sigma)
    k = _KERNEL_CACHE.get(sigma)
    if k is None:
        k = GaussianKernel.make(sigma)
        _KERNEL_CACHE[sigma] = k
    return k


def filter_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter of a 3-D array, clamp-to-edge boundary."""
    kern = get_kernel(sigma)
    if kern.radius == 0:
        return data.copy()
    out = data
    for axis in range(3):
        out = ndimage.correlate1d(out, kern.weights, axis=axis, mode="nearest")
    return out


def _axis_adjoint(data: np.ndarray, kern: GaussianKernel, axis: int) -> np.ndarray:
    """Transpose of clamp-to-edge correlation along one axis."""
    w = kern.weights
    r = kern.radius
    n = data.shape[axis]
    out = ndimage.correlate1d(data, w, axis=axis, mode="constant", cval=0.0)
    # Forward filtering read the replicated edge for every tap that fell
    # outside; the adjoint returns that mass to the boundary plane. For output
    # index 0 the coefficient on input plane i is sum of w[d] for d > i
    # (the zero-padded correlation above already accounted d == i).
    tail = np.cumsum(w[::-1])[::-1]  # tail[s] = sum_{d >= s - r} w, indexed from -r
    imax = min(r, n - 1)
    # coefficients for planes 0..imax at the low boundary: sum_{d=i+1..r} w[d]
    coef = np.array([tail[r + i + 1] if i + 1 <= r else 0.0 for i in range(imax + 1)])
    sl = [slice(None)] * 3
    lo = [slice(None)] * 3
    lo[axis] = slice(0, imax + 1)
    shape = [1, 1, 1]
    shape[axis] = imax + 1
    sl[axis] = slice(0, 1)
    out[tuple(sl)] += np.sum(
        data[tuple(lo)] * coef.reshape(shape), axis=axis, keepdims=True
    )
    hi = [slice(None)] * 3
    hi[axis] = slice(n - 1 - imax, n)
    sl[axis] = slice(n - 1, n)
    out[tuple(sl)] += np.sum(
        data[tuple(hi)] * coef[::-1].reshape(shape), axis=axis, keepdims=True
    )
    return out


def filter_array_adjoint(data: np.ndarray, sigma: float) -> np.ndarray:
    """Exact transpose of :func:`filter_array` (same sigma)."""
    kern = get_kernel(sigma)
    if kern.radius == 0:
        return data.copy()
    out = data
    for axis in (2, 1, 0):
        out = _axis_adjoint(out, kern, axis)
    return out
