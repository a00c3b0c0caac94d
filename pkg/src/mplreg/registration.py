"""Progressive alignment driver: one affine stage plus cascaded dense stages.

Each stage minimises the multi-perspective loss of the warped moving pair by
Adam over its own parameters (12 affine numbers, or a dense increment field
initialised at zero). The increment of cascade n is composed onto the
accumulated field as out(x) = acc(x + inc(x)) + inc(x), and the affine stage
is rasterised and treated as cascade zero of that chain, so the image is only
ever interpolated once per evaluation. The regulariser always acts on the
full composed field.

All gradients are exact derivatives of the discrete loss; the chain runs
through the trilinear warp of the image and label, through the composition
resampling of the accumulated field, and through the bending stencils.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import ConfigError, DivergenceError
from .grid import GridMeta, require_same_grid
from .interp import identity_coords
from .losses import (
    LossBreakdown,
    LossWeights,
    _bending_arrays,
    _gpl_eval,
    _mi_from_raw,
    _mi_grad_values,
    _parzen_side,
    _prefilter_fixed_label,
    _raw_histogram,
)
from .metrics import MetricsReport, compute_report
from .optim import AdamState, adam_step
from .transform import AffineParams, DisplacementField, affine_to_field, fraction_negative_jacobian, warp
from .volume import LabelMask, PreprocessSettings, Volume, preprocess, require_normalized


@dataclass(frozen=True)
class RegistrationPair:
    """Preprocessed moving/fixed images with their masks, all on one grid."""

    moving: Volume
    fixed: Volume
    moving_label: LabelMask
    fixed_label: LabelMask

    def __post_init__(self):
        require_same_grid(self.moving, self.fixed, "moving and fixed")
        require_same_grid(self.moving, self.moving_label, "moving and its label")
        require_same_grid(self.moving, self.fixed_label, "moving and fixed label")

    @property
    def grid(self) -> GridMeta:
        return self.fixed.grid


@dataclass(frozen=True)
class StageParameters:
    """What one stage optimised: affine parameters or a dense increment."""

    kind: str  # "affine" | "dense"
    affine: AffineParams | None = None
    field: DisplacementField | None = None

    def __post_init__(self):
        if self.kind == "affine":
            if self.affine is None or self.field is not None:
                raise ValueError("affine stage must carry affine params only")
        elif self.kind == "dense":
            if self.field is None or self.affine is not None:
                raise ValueError("dense stage must carry a field only")
        else:
            raise ValueError(f"unknown stage kind {self.kind!r}")


@dataclass(frozen=True)
class RegistrationConfig:
    """All knobs of the per-pair optimisation; JSON round-trippable."""

    cascades: int = 5
    iters_affine: int = 200
    iters_cascade: int = 200
    step_size: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    bins: int = 32
    parzen_sigma: float = 1.0
    mi_use_mask: bool = False
    gpl_mode: str = "soft_dice"
    stop_tol: float = 1e-6
    stop_window: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.cascades < 0:
            raise ConfigError(f"cascades must be >= 0, got {self.cascades}")
        if self.iters_affine < 1 or self.iters_cascade < 1:
            raise ConfigError("iteration counts must be >= 1")
        if self.step_size < 0:
            raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if self.parzen_sigma < 0:
            raise ConfigError(f"parzen_sigma must be >= 0, got {self.parzen_sigma}")
        if self.stop_window < 1:
            raise ConfigError(f"stop_window must be >= 1, got {self.stop_window}")

    def to_dict(self) -> dict:
        d = {
            "cascades": self.cascades,
            "iters_affine": self.iters_affine,
            "iters_cascade": self.iters_cascade,
            "step_size": self.step_size,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "lambda": self.weights.lam,
            "scales": list(self.weights.scales),
            "bins": self.bins,
            "parzen_sigma": self.parzen_sigma,
            "mi_use_mask": self.mi_use_mask,
            "gpl_mode": self.gpl_mode,
            "stop_tol": self.stop_tol,
            "stop_window": self.stop_window,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        d = dict(d)
        wkeys = {"alpha": "alpha", "beta": "beta", "lambda": "lam", "scales": "scales"}
        wargs = {attr: d.pop(key) for key, attr in wkeys.items() if key in d}
        known = {
            "cascades", "iters_affine", "iters_cascade", "step_size",
            "adam_beta1", "adam_beta2", "adam_eps", "bins", "parzen_sigma",
            "mi_use_mask", "gpl_mode", "stop_tol", "stop_window", "seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        weights = LossWeights(**wargs) if wargs else LossWeights()
        return cls(weights=weights, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RegistrationConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class RegistrationResult:
    final_field: DisplacementField
    warped_moving: Volume
    warped_label: LabelMask
    per_stage_losses: list[list[LossBreakdown]]
    stages: list[StageParameters]
    per_stage_pct_neg_jac: list[float]
    metrics: MetricsReport
    runtime_seconds: float
    config: RegistrationConfig


class _StageContext:
    """Per-registration precomputed state shared by all stages."""

    def __init__(self, pair: RegistrationPair, cfg: RegistrationConfig):
        require_normalized(pair.moving, "moving image")
        require_normalized(pair.fixed, "fixed image")
        self.pair = pair
        self.cfg = cfg
        self.w = cfg.weights
        self.dims = pair.grid.dims
        self.grid = pair.grid
        self.coords = identity_coords(self.dims)

        self.use_mi = self.w.alpha != 0.0
        self.use_gpl = self.w.beta != 0.0
        self.use_reg = self.w.lam != 0.0

        chans = []
        self.idx_m = self.idx_l = None
        if self.use_mi:
            self.idx_m = len(chans)
            chans.append(pair.moving.data)
        if self.use_gpl:
            self.idx_l = len(chans)
            chans.append(pair.moving_label.data)
        if not chans:
            # Degenerate but legal (reg-only): still sample the image so the
            # result assembly has something to trace.
            self.idx_m = 0
            chans.append(pair.moving.data)
        self.stack = np.ascontiguousarray(np.stack(chans))
        nch = self.stack.shape[0]
        self.vals = np.empty((nch,) + self.dims)
        self.grads = np.empty((nch,) + self.dims + (3,))

        self.mi_mask_flat = None
        if self.use_mi:
            if cfg.mi_use_mask:
                self.mi_mask_flat = pair.fixed_label.data.ravel()
            self.side_f = _parzen_side(pair.fixed.data, cfg.bins, cfg.parzen_sigma)
        if self.use_gpl:
            self.b_filtered, self.b_sq = _prefilter_fixed_label(
                pair.fixed_label.data, self.w.scales
            )

        # reusable cascade buffers
        self.out_buf = np.empty(self.dims + (3,))
        self.jac_buf = np.empty(self.dims + (3, 3))
        self.dldinc_buf = np.empty(self.dims + (3,))

    def eval_total_field(self, total: np.ndarray, need_grad: bool):
        """Loss breakdown at a composed field, and dLoss/dField if requested."""
        cfg, w = self.cfg, self.w
        if need_grad:
            _kernels.sample_volumes_grad(self.stack, total, self.vals, self.grads)
        else:
            _kernels.sample_volumes(self.stack, total, self.vals)

        mi = 0.0
        dmi = None
        if self.use_mi:
            side_m = _parzen_side(
                self.vals[self.idx_m],
                cfg.bins,
                cfg.parzen_sigma,
                want_deriv=need_grad,
                mask=self.mi_mask_flat,
            )
            hist = _raw_histogram(side_m, self.side_f)
            mi, dldh = _mi_from_raw(hist, need_grad)
            if need_grad:
                dmi = _mi_grad_values(side_m, self.side_f, dldh).reshape(self.dims)

        gpl = 0.0
        dgpl = None
        if self.use_gpl:
            gpl, dgpl = _gpl_eval(
                self.vals[self.idx_l],
                self.b_filtered,
                self.b_sq,
                w.scales,
                cfg.gpl_mode,
                need_grad,
            )

        reg = 0.0
        dreg = None
        if self.use_reg:
            reg, dreg = _bending_arrays(total, need_grad)

        breakdown = LossBreakdown.combine(mi, gpl, reg, w)
        if not need_grad:
            return breakdown, None
        dldout = np.zeros(self.dims + (3,)) if dreg is None else (w.lam * dreg)
        if dmi is not None:
            dldout += (w.alpha * dmi)[..., None] * self.grads[self.idx_m]
        if dgpl is not None:
            dldout += (w.beta * dgpl)[..., None] * self.grads[self.idx_l]
        return breakdown, dldout

    # -- affine stage -------------------------------------------------------

    def affine_field(self, params: np.ndarray) -> np.ndarray:
        a = params.reshape(3, 4)
        lin = a[:, :3] - np.eye(3)
        return np.tensordot(self.coords, lin.T, axes=([3], [0])) + a[:, 3]

    def affine_objective(self, params: np.ndarray, need_grad: bool = True):
        total = self.affine_field(params)
        breakdown, dldout = self.eval_total_field(total, need_grad)
        if not need_grad:
            return breakdown, None
        dlda = np.einsum("abcj,abck->jk", dldout, self.coords)
        dldt = dldout.sum(axis=(0, 1, 2))
        return breakdown, np.hstack([dlda, dldt[:, None]]).ravel()

    # -- dense cascade stage --------------------------------------------------

    def cascade_objective(self, acc: np.ndarray, inc_flat: np.ndarray, need_grad: bool = True):
        inc = inc_flat.reshape(self.dims + (3,))
        _kernels.compose_with_jac(acc, inc, self.out_buf, self.jac_buf)
        breakdown, dldout = self.eval_total_field(self.out_buf, need_grad)
        if not need_grad:
            return breakdown, None
        _kernels.chain_through_compose(dldout, self.jac_buf, self.dldinc_buf)
        return breakdown, self.dldinc_buf.ravel().copy()

    def compose_onto(self, acc: np.ndarray, inc: np.ndarray) -> np.ndarray:
        _kernels.compose_with_jac(acc, inc, self.out_buf, self.jac_buf)
        return self.out_buf.copy()


def _optimize_stage(objective, x0: np.ndarray, iters: int, cfg: RegistrationConfig, stage: str):
    """Adam loop with best-iterate bookkeeping and windowed early stop."""
    adam = AdamState.init(
        x0.size, cfg.step_size, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )
    x = x0.copy()
    breakdown, grad = objective(x)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"{stage}: non-finite loss at initial point", stage=stage)
    trace = [breakdown]
    best_x = x.copy()
    best = breakdown.total
    best_hist = [best]
    for _ in range(iters):
        x = adam_step(adam, x, grad)
        breakdown, grad = objective(x)
        if not np.isfinite(breakdown.total):
            raise DivergenceError(
                f"{stage}: loss became non-finite",
                stage=stage,
                partial={"best_params": best_x, "trace": trace},
            )
        trace.append(breakdown)
        if breakdown.total < best:
            best = breakdown.total
            best_x = x.copy()
        best_hist.append(best)
        if len(best_hist) > cfg.stop_window:
            prev = best_hist[-1 - cfg.stop_window]
            if (prev - best) / max(abs(prev), 1e-12) < cfg.stop_tol:
                break
    return best_x, trace


def register_affine(pair: RegistrationPair, config: RegistrationConfig) -> AffineParams:
    """Optimise the 12 affine parameters from identity; returns the best iterate."""
    ctx = _StageContext(pair, config)
    x0 = AffineParams.identity().as_vector()
    best, _ = _optimize_stage(ctx.affine_objective, x0, config.iters_affine, config, "affine")
    return AffineParams.from_vector(best)


def register_cascade(
    pair: RegistrationPair, accumulated: DisplacementField, config: RegistrationConfig
) -> DisplacementField:
    """Optimise one zero-initialised increment and compose it onto ``accumulated``."""
    require_same_grid(pair.fixed, accumulated, "pair and accumulated field")
    ctx = _StageContext(pair, config)
    acc = accumulated.data
    x0 = np.zeros(3 * pair.grid.num_voxels)
    best, _ = _optimize_stage(
        lambda x, need_grad=True: ctx.cascade_objective(acc, x, need_grad),
        x0,
        config.iters_cascade,
        config,
        "cascade",
    )
    out = ctx.compose_onto(acc, best.reshape(ctx.dims + (3,)))
    return DisplacementField(pair.grid, out)


def register(pair: RegistrationPair, config: RegistrationConfig) -> RegistrationResult:
    """Full pipeline: affine stage, then ``config.cascades`` dense refinements."""
    t0 = time.perf_counter()
    ctx = _StageContext(pair, config)
    stages: list[StageParameters] = []
    traces: list[list[LossBreakdown]] = []
    jneg: list[float] = []

    def _partial():
        return {"stages": stages, "traces": traces, "pct_neg_jac": jneg}

    try:
        x0 = AffineParams.identity().as_vector()
        best, trace = _optimize_stage(
            ctx.affine_objective, x0, config.iters_affine, config, "affine"
        )
    except DivergenceError as e:
        raise DivergenceError(str(e), stage="affine", partial=_partial()) from None
    aff = AffineParams.from_vector(best)
    stages.append(StageParameters(kind="affine", affine=aff))
    traces.append(trace)
    acc = ctx.affine_field(best)
    acc_field = DisplacementField(pair.grid, acc)
    jneg.append(100.0 * fraction_negative_jacobian(acc_field))

    for n in range(1, config.cascades + 1):
        x0 = np.zeros(3 * pair.grid.num_voxels)
        try:
            best, trace = _optimize_stage(
                lambda x, need_grad=True: ctx.cascade_objective(acc, x, need_grad),
                x0,
                config.iters_cascade,
                config,
                f"cascade {n}",
            )
        except DivergenceError as e:
            raise DivergenceError(str(e), stage=f"cascade {n}", partial=_partial()) from None
        inc = best.reshape(ctx.dims + (3,))
        acc = ctx.compose_onto(acc, inc)
        acc_field = DisplacementField(pair.grid, acc)
        stages.append(StageParameters(kind="dense", field=acc_field))
        traces.append(trace)
        jneg.append(100.0 * fraction_negative_jacobian(acc_field))

    final_field = acc_field
    warped_moving = warp(pair.moving, final_field)
    warped_label = warp(pair.moving_label, final_field)
    runtime = time.perf_counter() - t0
    report = compute_report(final_field, warped_label, pair.fixed_label, runtime)
    return RegistrationResult(
        final_field=final_field,
        warped_moving=warped_moving,
        warped_label=warped_label,
        per_stage_losses=traces,
        stages=stages,
        per_stage_pct_neg_jac=jneg,
        metrics=report,
        runtime_seconds=runtime,
        config=config,
    )


def apply_to_companion(result: RegistrationResult, companion: Volume) -> Volume:
    """Carry a co-aligned companion volume through the computed transform."""
    return warp(companion, result.final_field)


def preprocess_pair(
    fixed: Volume,
    moving: Volume,
    fixed_label: LabelMask,
    moving_label: LabelMask,
    settings: PreprocessSettings = PreprocessSettings(),
) -> RegistrationPair:
    """Preprocess both sides and put them on a common grid.

    Each image is cropped around its own mask ROI, which centres the anatomy
    on both sides (the coarse pre-alignment of the pipeline). The moving grid
    metadata is then overridden with the fixed grid's: registration operates
    in index space on the common cube.
    """
    f, fl = preprocess(fixed, fixed_label, settings)
    m, ml = preprocess(moving, moving_label, settings)
    m = Volume(f.grid, m.data)
    ml = LabelMask(f.grid, ml.data)
    return RegistrationPair(moving=m, fixed=f, moving_label=ml, fixed_label=fl)
