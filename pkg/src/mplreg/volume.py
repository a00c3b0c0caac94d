"""Scalar 3-D volumes, label masks, and the preprocessing pipeline.

Preprocessing follows the usual multimodal lung protocol: resample to
isotropic spacing, crop to the lung region with a small margin, pad to a
fixed cube, then normalise intensities into [0, 1] so the joint-histogram
loss has a fixed domain.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRangeError, DomainError, EmptyRoiError
from .grid import GridMeta
from .interp import sample_trilinear


@dataclass(frozen=True)
class Volume:
    """A 3-D scalar image on a regular grid.

    Immutable by convention: ``data`` is marked read-only at construction and
    every operation returns a new instance.
    """

    grid: GridMeta
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.shape != self.grid.dims:
            raise ValueError(f"data shape {arr.shape} != grid dims {self.grid.dims}")
        if not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        self._validate_values(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def _validate_values(self, arr: np.ndarray) -> None:
        pass

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.grid.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.grid.origin

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same grid, new voxel values (returns the same concrete type)."""
        return type(self)(self.grid, data)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        data = np.asarray(data, dtype=np.float64)
        return cls(GridMeta(data.shape, spacing, origin), data)


class LabelMask(Volume):
    """A Volume whose values live in [0, 1]: binary on load, soft after warping."""

    _TOL = 1e-9

    def _validate_values(self, arr: np.ndarray) -> None:
        lo, hi = arr.min(), arr.max()
        if lo < -self._TOL or hi > 1.0 + self._TOL:
            raise ValueError(f"label values outside [0,1]: min={lo}, max={hi}")
        # Forgive float dust from interpolation, then pin the range exactly.
        np.clip(arr, 0.0, 1.0, out=arr)


def resample_isotropic(v: Volume, target_spacing: float) -> Volume:
    """Resample onto an isotropic grid of the given spacing (mm).

    Output dims are ceil(dims * spacing / target) per axis. Values come from
    trilinear interpolation at the new voxel centres, with samples outside
    the source domain clamped to the border.
    """
    t = float(target_spacing)
    if not np.isfinite(t) or t <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    dims = v.grid.dims
    spacing = v.grid.spacing
    if spacing == (t, t, t):
        return v
    out_dims = tuple(int(np.ceil(dims[a] * spacing[a] / t)) for a in range(3))
    # Voxel centres sit at (i + 0.5) * spacing in an edge-anchored world frame,
    # so the source coordinate of new centre i is (i + 0.5) * t / s - 0.5.
    coords = [
        (np.arange(out_dims[a], dtype=np.float64) + 0.5) * (t / spacing[a]) - 0.5
        for a in range(3)
    ]
    px, py, pz = np.meshgrid(*coords, indexing="ij")
    pts = np.stack([px, py, pz], axis=-1)
    out = sample_trilinear(v.data, pts)
    origin = tuple(v.grid.origin[a] + 0.5 * (t - spacing[a]) for a in range(3))
    return type(v)(GridMeta(out_dims, (t, t, t), origin), out)


def mask_bounding_box(mask: LabelMask, margin: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Tight bounding box of mask voxels > 0.5, dilated by ``margin`` voxels.

    Returns (lo, hi) with hi exclusive, clipped to the mask's grid.
    """
    idx = np.argwhere(mask.data > 0.5)
    if idx.size == 0:
        raise EmptyRoiError("mask has no voxels above 0.5")
    lo = np.maximum(idx.min(axis=0) - margin, 0)
    hi = np.minimum(idx.max(axis=0) + 1 + margin, mask.grid.dims)
    return lo, hi


def crop_pad(
    v: Volume,
    roi: tuple[np.ndarray, np.ndarray],
    out_dims=(128, 128, 128),
    pad_value: float = 0.0,
) -> Volume:
    """Extract the ROI, centre it in a fresh grid of ``out_dims``, pad with ``pad_value``.

    The origin is updated so retained voxels keep their world coordinates.
    If the ROI exceeds ``out_dims`` on some axis it is centre-cropped and a
    RuntimeWarning is emitted.
    """
    lo = np.asarray(roi[0], dtype=np.intp)
    hi = np.asarray(roi[1], dtype=np.intp)
    out_dims = tuple(int(d) for d in out_dims)
    size = hi - lo
    if np.any(size <= 0):
        raise EmptyRoiError(f"empty ROI: lo={lo.tolist()}, hi={hi.tolist()}")
    if np.any(size > np.asarray(out_dims)):
        warnings.warn(
            f"ROI size {size.tolist()} exceeds output dims {out_dims}; centre-cropping",
            RuntimeWarning,
            stacklevel=2,
        )
    # Output index o holds input index o - start + lo (ceil-centred placement).
    start = np.array([(out_dims[a] - size[a] + 1) // 2 for a in range(3)], dtype=np.intp)
    out = np.full(out_dims, float(pad_value), dtype=np.float64)
    src_lo = np.maximum(lo, lo - start)        # clip when start < 0 (crop)
    src_hi = np.minimum(hi, lo - start + np.asarray(out_dims))
    dst_lo = src_lo - lo + start
    dst_hi = src_hi - lo + start
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = v.data[
        src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
    ]
    origin = tuple(
        v.grid.origin[a] + (lo[a] - start[a]) * v.grid.spacing[a] for a in range(3)
    )
    return type(v)(GridMeta(out_dims, v.grid.spacing, origin), out)


def normalize_minmax(v: Volume, clip: tuple[float, float] | None = None) -> Volume:
    """Affinely map intensities into [0, 1].

    Without ``clip`` the data range is mapped exactly onto [0, 1] (constant
    input raises DegenerateRangeError). With ``clip=(lo, hi)`` values are
    clamped first and the clip bounds define the affine map, so fixed
    modality windows (e.g. Hounsfield) give reproducible scaling.
    """
    data = v.data
    if clip is not None:
        lo, hi = float(clip[0]), float(clip[1])
        if not hi > lo:
            raise ValueError(f"clip range must satisfy hi > lo, got {clip}")
        out = (np.clip(data, lo, hi) - lo) / (hi - lo)
        return v.with_data(out)
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        raise DegenerateRangeError("constant volume cannot be min-max normalised without clip")
    return v.with_data((data - lo) / (hi - lo))


def require_normalized(v: Volume, what: str = "volume", tol: float = 1e-6) -> None:
    """Histogram-based losses assume intensities in [0, 1]."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if lo < -tol or hi > 1.0 + tol:
        raise DomainError(f"{what} is not normalised to [0,1]: min={lo}, max={hi}")


@dataclass(frozen=True)
class PreprocessSettings:
    """Defaults mirror the clinical pipeline: 5 mm isotropic, 128 cube."""

    target_spacing: float = 5.0
    out_dims: tuple[int, int, int] = (128, 128, 128)
    roi_margin: int = 2
    pad_value: float = 0.0
    clip: tuple[float, float] | None = None


def preprocess(
    image: Volume, mask: LabelMask, settings: PreprocessSettings = PreprocessSettings()
) -> tuple[Volume, LabelMask]:
    """Resample, crop to the mask ROI, pad, and normalise one image/mask pair."""
    img = resample_isotropic(image, settings.target_spacing)
    msk = resample_isotropic(mask, settings.target_spacing)
    roi = mask_bounding_box(msk, margin=settings.roi_margin)
    img = crop_pad(img, roi, settings.out_dims, pad_value=settings.pad_value)
    msk = crop_pad(msk, roi, settings.out_dims, pad_value=0.0)
    img = normalize_minmax(img, clip=settings.clip)
    return img, msk
