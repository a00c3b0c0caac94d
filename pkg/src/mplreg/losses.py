"""The multi-perspective registration loss and its analytic gradients.

Three terms, all minimised:

* mutual-information loss: negative MI of a Parzen-smoothed joint intensity
  histogram of the warped moving image and the fixed image;
* label-pyramid loss: one minus the mean soft Dice of the two segmentation
  masks after Gaussian filtering at several scales;
* bending energy of the displacement field (squared second differences).

Every gradient here is the exact derivative of the discrete computation, so
central finite differences converge to it; that property is enforced by the
gradient-check suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .errors import ConfigError, NonDifferentiableError
from .filters import filter_array, filter_array_adjoint
from .grid import require_same_grid
from .transform import DisplacementField, ScalarField
from .volume import LabelMask, Volume, require_normalized

DEFAULT_SCALES = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)
SOFT_DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Term weights and the Gaussian pyramid scales."""

    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 2.0
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        for name in ("alpha", "beta", "lam"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if len(self.scales) == 0:
            raise ConfigError("scales must be non-empty")
        if any(s < 0 for s in self.scales):
            raise ConfigError(f"scales must be non-negative, got {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {self.scales}")


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components plus the weighted total they recompose into."""

    mi: float
    gpl: float
    reg: float
    total: float

    @classmethod
    def combine(cls, mi: float, gpl: float, reg: float, w: LossWeights) -> "LossBreakdown":
        return cls(mi, gpl, reg, w.alpha * mi + w.beta * gpl + w.lam * reg)


@dataclass(frozen=True)
class JointHistogram:
    """Parzen-smoothed joint intensity distribution, normalised to sum 1."""

    bins: int
    parzen_sigma: float
    joint: np.ndarray
    marginal_m: np.ndarray
    marginal_f: np.ndarray


# ---------------------------------------------------------------------------
# Parzen joint histogram and mutual information


def _window_radius(sigma: float) -> int:
    # Weights at the window edge are below exp(-24.5) of the peak, which keeps
    # the windowed estimator within ~1e-11 of the full-support Gaussian.
    return max(3, int(np.ceil(6.0 * sigma)))


@dataclass
class _ParzenSide:
    """Per-voxel bin weights of one image against the shared histogram axis."""

    w: np.ndarray          # (N, ncols)
    dw: np.ndarray | None  # d w / d value (includes the bins factor), or None
    base: np.ndarray       # (N,) int64 window start bin
    bins: int
    sigma: float


def _parzen_side(
    values: np.ndarray,
    bins: int,
    sigma: float,
    want_deriv: bool = False,
    mask: np.ndarray | None = None,
) -> _ParzenSide:
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    n = flat.size
    if sigma == 0.0:
        k = np.clip(np.floor(flat * bins), 0, bins - 1).astype(np.int64)
        w = np.ones((n, 1))
        if mask is not None:
            w *= mask.reshape(n, 1)
        return _ParzenSide(w, None, k, bins, sigma)
    wrad = _window_radius(sigma)
    ncols = 2 * wrad + 2
    c = flat * bins - 0.5
    w = np.empty((n, ncols))
    dw = np.empty((n, ncols)) if want_deriv else np.empty((1, 1))
    base = np.empty(n, dtype=np.int64)
    _kernels.parzen_weights(c, bins, sigma, wrad, w, dw, base, want_deriv)
    if want_deriv:
        dw *= float(bins)  # chain rule: d(bin coordinate)/d(value) = bins
    if mask is not None:
        mcol = mask.reshape(n, 1)
        w = w * mcol
        if want_deriv:
            dw = dw * mcol
    return _ParzenSide(w, dw if want_deriv else None, base, bins, sigma)


def _raw_histogram(side_m: _ParzenSide, side_f: _ParzenSide) -> np.ndarray:
    """Unnormalised joint histogram of two weight sides.

    Accumulation runs in a zero-padded array so the window kernels need no
    bounds checks; clipped bins carry weight 0 and never leak mass back.
    """
    if side_m.w.shape != side_f.w.shape:
        raise ValueError("histogram sides must share sigma and size")
    pad = side_m.w.shape[1]
    histp = np.zeros((side_m.bins + 2 * pad, side_f.bins + 2 * pad))
    _kernels.parzen_hist(side_m.w, side_f.w, side_m.base + pad, side_f.base + pad, histp)
    return np.ascontiguousarray(histp[pad : pad + side_m.bins, pad : pad + side_f.bins])


def _mi_grad_values(side_m: _ParzenSide, side_f: _ParzenSide, dldh: np.ndarray) -> np.ndarray:
    """Per-sample dLoss/d(value) from the histogram gradient, flat (N,)."""
    pad = side_m.w.shape[1]
    dldh_p = np.zeros((side_m.bins + 2 * pad, side_f.bins + 2 * pad))
    dldh_p[pad : pad + side_m.bins, pad : pad + side_f.bins] = dldh
    grad = np.empty(side_m.w.shape[0])
    _kernels.parzen_hist_grad(
        side_m.dw, side_f.w, side_m.base + pad, side_f.base + pad, dldh_p, grad
    )
    return grad


def _mi_from_raw(hist: np.ndarray, need_grad: bool):
    """Negative mutual information of a raw (unnormalised) joint histogram.

    Returns (loss, dLoss/dHist or None). The gradient goes through the global
    normalisation: p = H / sum(H).
    """
    total = hist.sum()
    if total <= 0.0:
        return 0.0, (np.zeros_like(hist) if need_grad else None)
    p = hist / total
    pm = p.sum(axis=1)
    pf = p.sum(axis=0)
    pos = p > 0.0
    logratio = np.zeros_like(p)
    denom = pm[:, None] * pf[None, :]
    logratio[pos] = np.log(p[pos] / denom[pos])
    loss = -float(np.sum(p[pos] * logratio[pos]))
    if not need_grad:
        return loss, None
    dldh = np.zeros_like(p)
    dldh[pos] = (-logratio[pos] - loss) / total
    return loss, dldh


def joint_histogram(
    m: Volume,
    f: Volume,
    bins: int = 32,
    parzen_sigma: float = 1.0,
    mask: LabelMask | None = None,
) -> JointHistogram:
    """Parzen joint histogram of two normalised, grid-compatible volumes."""
    require_same_grid(m, f, "histogram inputs")
    require_normalized(m, "moving image")
    require_normalized(f, "fixed image")
    if bins < 2:
        raise ConfigError(f"bins must be >= 2, got {bins}")
    if parzen_sigma < 0:
        raise ConfigError(f"parzen_sigma must be >= 0, got {parzen_sigma}")
    mask_flat = None
    if mask is not None:
        require_same_grid(m, mask, "image and mask")
        mask_flat = mask.data.ravel()
    side_m = _parzen_side(m.data, bins, parzen_sigma, mask=mask_flat)
    side_f = _parzen_side(f.data, bins, parzen_sigma)
    hist = _raw_histogram(side_m, side_f)
    total = hist.sum()
    joint = hist / total if total > 0 else hist
    return JointHistogram(bins, parzen_sigma, joint, joint.sum(axis=1), joint.sum(axis=0))


def mi_loss(
    m: Volume,
    f: Volume,
    bins: int = 32,
    parzen_sigma: float = 1.0,
    mask: LabelMask | None = None,
) -> float:
    """Negative mutual information; <= 0, lower means better alignment."""
    h = joint_histogram(m, f, bins, parzen_sigma, mask)
    loss, _ = _mi_from_raw(h.joint, need_grad=False)
    return loss


def mi_loss_gradient(
    m: Volume,
    f: Volume,
    bins: int = 32,
    parzen_sigma: float = 1.0,
    mask: LabelMask | None = None,
) -> ScalarField:
    """Per-voxel derivative of mi_loss with respect to the moving intensities."""
    if parzen_sigma == 0.0:
        raise NonDifferentiableError("mi gradient needs parzen_sigma > 0")
    require_same_grid(m, f, "histogram inputs")
    require_normalized(m, "moving image")
    require_normalized(f, "fixed image")
    mask_flat = mask.data.ravel() if mask is not None else None
    if mask is not None:
        require_same_grid(m, mask, "image and mask")
    side_m = _parzen_side(m.data, bins, parzen_sigma, want_deriv=True, mask=mask_flat)
    side_f = _parzen_side(f.data, bins, parzen_sigma)
    hist = _raw_histogram(side_m, side_f)
    _, dldh = _mi_from_raw(hist, need_grad=True)
    grad = _mi_grad_values(side_m, side_f, dldh)
    return ScalarField(m.grid, grad.reshape(m.grid.dims))


# ---------------------------------------------------------------------------
# Gaussian pyramid label loss


def gaussian_filter(v: Volume | LabelMask, sigma: float):
    """Separable Gaussian filtering of a volume; sigma = 0 is the identity."""
    return v.with_data(filter_array(v.data, sigma))


def _gpl_eval(
    ml: np.ndarray,
    b_filtered: list[np.ndarray],
    b_sq: list[float],
    scales: tuple[float, ...],
    mode: str,
    need_grad: bool,
):
    """Shared label-pyramid evaluation against pre-filtered fixed labels."""
    nscales = len(scales)
    loss = 0.0
    grad = np.zeros_like(ml) if need_grad else None
    nvox = ml.size
    for s, sigma in enumerate(scales):
        a = filter_array(ml, sigma)
        b = b_filtered[s]
        if mode == "soft_dice":
            num = 2.0 * float(np.sum(a * b)) + SOFT_DICE_EPS
            den = float(np.sum(a * a)) + b_sq[s] + SOFT_DICE_EPS
            dice_s = num / den
            loss += (1.0 - dice_s) / nscales
            if need_grad:
                # d(1 - dice)/da = -(2 b - dice * 2 a) / den
                resid = (2.0 / (nscales * den)) * (dice_s * a - b)
                grad += filter_array_adjoint(resid, sigma)
        elif mode == "mse":
            diff = a - b
            loss += float(np.mean(diff * diff)) / nscales
            if need_grad:
                grad += filter_array_adjoint((2.0 / (nscales * nvox)) * diff, sigma)
        else:
            raise ConfigError(f"unknown gpl mode {mode!r}")
    return loss, grad


def _prefilter_fixed_label(fl: np.ndarray, scales) -> tuple[list[np.ndarray], list[float]]:
    b_filtered = [filter_array(fl, s) for s in scales]
    b_sq = [float(np.sum(b * b)) for b in b_filtered]
    return b_filtered, b_sq


def gpl_loss(
    m_label: LabelMask,
    f_label: LabelMask,
    scales=DEFAULT_SCALES,
    mode: str = "soft_dice",
) -> float:
    """One minus mean multi-scale soft Dice of the two masks; in [0, 1]."""
    require_same_grid(m_label, f_label, "label masks")
    scales = tuple(float(s) for s in scales)
    if len(scales) == 0:
        raise ConfigError("scales must be non-empty")
    b_filtered, b_sq = _prefilter_fixed_label(f_label.data, scales)
    loss, _ = _gpl_eval(m_label.data, b_filtered, b_sq, scales, mode, need_grad=False)
    return loss


def gpl_loss_gradient(
    m_label: LabelMask,
    f_label: LabelMask,
    scales=DEFAULT_SCALES,
    mode: str = "soft_dice",
) -> ScalarField:
    """Per-voxel derivative of gpl_loss with respect to the moving label values."""
    require_same_grid(m_label, f_label, "label masks")
    scales = tuple(float(s) for s in scales)
    if len(scales) == 0:
        raise ConfigError("scales must be non-empty")
    b_filtered, b_sq = _prefilter_fixed_label(f_label.data, scales)
    _, grad = _gpl_eval(m_label.data, b_filtered, b_sq, scales, mode, need_grad=True)
    return ScalarField(m_label.grid, grad)


# ---------------------------------------------------------------------------
# Bending energy


def _bending_arrays(u: np.ndarray, need_grad: bool):
    """Mean squared second differences of a (n0,n1,n2,3) field over interior voxels."""
    n0, n1, n2 = u.shape[:3]
    if min(n0, n1, n2) < 3:
        raise ValueError(f"bending energy needs dims >= 3 per axis, got {u.shape[:3]}")
    n_int = (n0 - 2) * (n1 - 2) * (n2 - 2)
    norm = 1.0 / (3.0 * n_int)
    u = np.ascontiguousarray(u)
    grad = np.zeros_like(u) if need_grad else _EMPTY_FIELD
    energy = _kernels.bending_energy_grad(u, grad, norm, need_grad)
    return energy, (grad if need_grad else None)


_EMPTY_FIELD = np.empty((1, 1, 1, 3))


def bending_energy(phi: DisplacementField) -> float:
    """Mean squared second spatial derivatives; zero on any affine field."""
    e, _ = _bending_arrays(phi.data, need_grad=False)
    return e


def bending_energy_gradient(phi: DisplacementField) -> DisplacementField:
    """Exact adjoint of the second-difference stencils behind bending_energy."""
    _, g = _bending_arrays(phi.data, need_grad=True)
    return DisplacementField(phi.grid, g)


# ---------------------------------------------------------------------------
# Combined loss and the finite-difference checker


def mpl_loss(
    m_warped: Volume,
    f: Volume,
    m_label_warped: LabelMask,
    f_label: LabelMask,
    phi: DisplacementField,
    w: LossWeights,
    bins: int = 32,
    parzen_sigma: float = 1.0,
    mask: LabelMask | None = None,
    gpl_mode: str = "soft_dice",
) -> LossBreakdown:
    """Weighted multi-perspective loss on already-warped inputs."""
    require_same_grid(m_warped, f, "images")
    require_same_grid(m_label_warped, f_label, "labels")
    require_same_grid(m_warped, phi, "image and field")
    mi = mi_loss(m_warped, f, bins, parzen_sigma, mask)
    gpl = gpl_loss(m_label_warped, f_label, w.scales, gpl_mode)
    reg = bending_energy(phi)
    return LossBreakdown.combine(mi, gpl, reg, w)


def finite_difference_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    step: float = 1e-4,
) -> float:
    """Max relative mismatch between an analytic gradient and central differences.

    Relative error per coordinate is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    Intended for desk-scale problems; refuses parameter vectors above 1e4.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.size > 10_000:
        raise ValueError(f"finite differences only at desk scale, got {params.size} params")
    _, ga = loss_and_grad(params)
    ga = np.asarray(ga, dtype=np.float64)
    worst = 0.0
    for i in range(params.size):
        p = params.copy()
        p[i] += step
        lp, _ = loss_and_grad(p)
        p[i] -= 2.0 * step
        lm, _ = loss_and_grad(p)
        gfd = (lp - lm) / (2.0 * step)
        rel = abs(ga[i] - gfd) / max(1e-8, abs(ga[i]) + abs(gfd))
        worst = max(worst, rel)
    return worst
