"""Command-line surface: register, metrics, phantom, check-grad, overlay, suite.

Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 runtime
divergence or generation failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergenceError, GenerationError, GridMismatchError, MplregError
from .grid import GridMeta
from .losses import LossWeights, finite_difference_check
from .metrics import compute_report, dice
from .nifti import read_nifti, write_nifti
from .phantom import PhantomParams, generate_phantom_pair, save_case
from .registration import (
    RegistrationConfig,
    RegistrationPair,
    _StageContext,
    preprocess_pair,
    register,
)
from .transform import DisplacementField, fraction_negative_jacobian, load_field, save_field
from .volume import LabelMask, PreprocessSettings, Volume

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

GRAD_TOL = 1e-3


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _die(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"mplreg: error: {msg}", file=sys.stderr)
    return code


def _require_files(*paths) -> str | None:
    for p in paths:
        if not Path(p).is_file():
            return f"no such file: {p}"
    return None


def _load_config(args) -> RegistrationConfig:
    if getattr(args, "config", None):
        cfg = RegistrationConfig.from_json(Path(args.config).read_text())
    else:
        cfg = RegistrationConfig()
    if getattr(args, "cascades", None) is not None:
        cfg = dataclasses.replace(cfg, cascades=args.cascades)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _write_manifest(out_dir: Path, payload: dict) -> None:
    payload = dict(payload, tool="mplreg", version=__version__)
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_loss_csv(path: Path, traces) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "iter", "mi", "gpl", "reg", "total"])
        for s, trace in enumerate(traces):
            name = "affine" if s == 0 else f"cascade_{s}"
            for it, row in enumerate(trace):
                writer.writerow([name, it, repr(row.mi), repr(row.gpl), repr(row.reg), repr(row.total)])


def _preprocess_settings(args) -> PreprocessSettings:
    return PreprocessSettings(
        target_spacing=args.target_spacing,
        out_dims=(args.out_dims,) * 3,
        roi_margin=args.roi_margin,
        pad_value=args.pad_value,
    )


# ---------------------------------------------------------------------------
# register


def cmd_register(args) -> int:
    missing = _require_files(args.fixed, args.moving, args.fixed_label, args.moving_label)
    if missing:
        return _die(missing)
    if args.config and not Path(args.config).is_file():
        return _die(f"no such file: {args.config}")
    out = Path(args.out)
    started = _now()
    try:
        cfg = _load_config(args)
        fixed = read_nifti(args.fixed)
        moving = read_nifti(args.moving)
        fixed_label = read_nifti(args.fixed_label, as_label=True)
        moving_label = read_nifti(args.moving_label, as_label=True)
        settings = _preprocess_settings(args)
        pair = preprocess_pair(fixed, moving, fixed_label, moving_label, settings)
    except (MplregError, ValueError, json.JSONDecodeError) as e:
        return _die(str(e))

    out.mkdir(parents=True, exist_ok=True)
    inputs = {
        "fixed": str(args.fixed),
        "moving": str(args.moving),
        "fixed_label": str(args.fixed_label),
        "moving_label": str(args.moving_label),
    }
    try:
        result = register(pair, cfg)
    except DivergenceError as e:
        traces = e.partial.get("traces", []) if e.partial else []
        _write_loss_csv(out / "loss.csv", traces)
        _write_manifest(
            out,
            {
                "command": "register",
                "status": "diverged",
                "stage": e.stage,
                "error": str(e),
                "config": cfg.to_dict(),
                "inputs": inputs,
                "seed": cfg.seed,
                "started": started,
                "finished": _now(),
            },
        )
        print(f"mplreg: divergence in {e.stage}: {e}", file=sys.stderr)
        return EXIT_DIVERGED

    write_nifti(result.warped_moving, out / "warped.nii")
    write_nifti(result.warped_label, out / "warped_label.nii")
    save_field(result.final_field, out / "field")
    _write_loss_csv(out / "loss.csv", result.per_stage_losses)
    (out / "metrics.json").write_text(result.metrics.to_json())
    _write_manifest(
        out,
        {
            "command": "register",
            "status": "ok",
            "config": cfg.to_dict(),
            "inputs": inputs,
            "outputs": {
                "warped": "warped.nii",
                "warped_label": "warped_label.nii",
                "field": "field.f32",
                "loss": "loss.csv",
                "metrics": "metrics.json",
            },
            "preprocess": dataclasses.asdict(settings),
            "seed": cfg.seed,
            "runtime_seconds": result.runtime_seconds,
            "started": started,
            "finished": _now(),
        },
    )
    print(result.metrics.to_json(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# metrics


def cmd_metrics(args) -> int:
    missing = _require_files(args.warped_label, args.fixed_label)
    if missing:
        return _die(missing)
    try:
        warped = read_nifti(args.warped_label, as_label=True)
        fixed = read_nifti(args.fixed_label, as_label=True)
        payload = {"dice": dice(warped, fixed)}
        if args.field:
            fld = load_field(args.field)
            payload["pct_neg_jacobian"] = 100.0 * fraction_negative_jacobian(fld)
            payload["field_rms"] = fld.rms()
    except (MplregError, ValueError, FileNotFoundError) as e:
        return _die(str(e))
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    print(text, end="")
    pj = payload.get("pct_neg_jacobian")
    print(f"| mplreg | {payload['dice']:.3f} | " + (f"{pj:.2f}% |" if pj is not None else "n/a |"))
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# phantom


def cmd_phantom(args) -> int:
    params = PhantomParams(
        dims=(args.dims,) * 3,
        deformation_amplitude=args.amplitude,
        deformation_smoothness=args.smoothness,
        noise_sigma=args.noise_sigma,
    )
    try:
        case = generate_phantom_pair(args.seed, params)
    except GenerationError as e:
        print(f"mplreg: phantom generation failed: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    save_case(case, args.out)
    print(f"wrote phantom case seed={args.seed} to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-grad


def _grad_check_cases(dims: int, seed: int):
    """Finite-difference checks over the production loss objectives."""
    rng = np.random.default_rng(seed)
    n = (dims,) * 3
    grid = GridMeta(n, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    pair = RegistrationPair(
        moving=Volume(grid, rng.random(n)),
        fixed=Volume(grid, rng.random(n)),
        moving_label=LabelMask(grid, rng.random(n)),
        fixed_label=LabelMask(grid, rng.random(n)),
    )
    base = RegistrationConfig(bins=16, parzen_sigma=1.0)
    # Keep every sample coordinate at least 0.05 voxels away from cell
    # boundaries: the trilinear interpolant is only piecewise smooth, and a
    # finite-difference bracket straddling a cell edge measures the kink, not
    # the derivative. Displacement magnitudes in [0.05, 0.45] guarantee a
    # valid bracket for any seed.
    signs = rng.choice((-1.0, 1.0), size=n + (3,))
    field0 = (signs * (0.05 + 0.4 * rng.random(n + (3,)))).ravel()
    # Same idea for the affine point: |linear perturbation| * max coordinate
    # stays well below the 0.2 margin of the translation offsets.
    affine0 = np.eye(3, 4).ravel() + np.concatenate(
        [rng.uniform(-0.005, 0.005, 12).reshape(3, 4)[:, :3], np.zeros((3, 1))], axis=1
    ).ravel()
    affine0 = affine0.reshape(3, 4)
    affine0[:, 3] = rng.choice((-1.0, 1.0), 3) * (0.2 + 0.6 * rng.random(3))
    affine0 = affine0.ravel()
    zero_acc = np.zeros(n + (3,))
    scales = (0.0, 1.0, 2.0)

    def quad(params):
        q = np.arange(1.0, params.size + 1)
        return 0.5 * float(params @ (q * params)), q * params

    cases = [("quadratic self-test", quad, rng.standard_normal(4), 1e-8)]

    for name, weights in [
        ("mutual information", LossWeights(1.0, 0.0, 0.0, scales)),
        ("label pyramid", LossWeights(0.0, 1.0, 0.0, scales)),
        ("bending energy", LossWeights(0.0, 0.0, 1.0, scales)),
        ("full loss", LossWeights(1.0, 1.0, 2.0, scales)),
    ]:
        cfg = dataclasses.replace(base, weights=weights)
        ctx = _StageContext(pair, cfg)

        def f_field(params, ctx=ctx):
            bd, g = ctx.cascade_objective(zero_acc, params)
            return bd.total, g

        cases.append((f"{name} wrt dense field", f_field, field0, GRAD_TOL))

    for name, weights in [
        ("mutual information", LossWeights(1.0, 0.0, 0.0, scales)),
        ("full loss", LossWeights(1.0, 1.0, 2.0, scales)),
    ]:
        cfg = dataclasses.replace(base, weights=weights)
        ctx = _StageContext(pair, cfg)

        def f_aff(params, ctx=ctx):
            bd, g = ctx.affine_objective(params)
            return bd.total, g

        cases.append((f"{name} wrt affine params", f_aff, affine0, GRAD_TOL))
    return cases


def cmd_check_grad(args) -> int:
    if args.dims > 8:
        return _die(f"check-grad is desk-scale only: dims must be <= 8, got {args.dims}")
    t0 = time.perf_counter()
    failures = 0
    for name, fn, params, tol in _grad_check_cases(args.dims, args.seed):
        err = finite_difference_check(fn, params)
        ok = err < tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name:38s} max rel err {err:.3e} (tol {tol:g})")
    print(f"total {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# overlay


def _window_u8(slc: np.ndarray, window) -> np.ndarray:
    lo, hi = (float(slc.min()), float(slc.max())) if window is None else window
    if hi <= lo:
        hi = lo + 1.0
    x = np.clip((slc - lo) / (hi - lo), 0.0, 1.0)
    return (x * 255.0).round().astype(np.uint8)


def sobel_edge_mask(slc: np.ndarray, quantile: float = 0.9) -> np.ndarray:
    """Top-decile Sobel gradient magnitude of a 2-D slice."""
    from scipy import ndimage

    gx = ndimage.sobel(slc, axis=0, mode="nearest")
    gy = ndimage.sobel(slc, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    thr = np.quantile(mag, quantile)
    return mag > thr


def cmd_overlay(args) -> int:
    missing = _require_files(args.fixed, args.moving)
    if missing:
        return _die(missing)
    try:
        fixed = read_nifti(args.fixed)
        moving = read_nifti(args.moving)
        if fixed.dims != moving.dims:
            raise GridMismatchError(f"dims differ: {fixed.dims} vs {moving.dims}")
    except MplregError as e:
        return _die(str(e))
    axis = args.axis
    index = args.index if args.index is not None else fixed.dims[axis] // 2
    if not 0 <= index < fixed.dims[axis]:
        return _die(f"slice {index} out of range for axis {axis} with {fixed.dims[axis]} voxels")
    window = tuple(args.window) if args.window else None
    fixed_slc = np.take(fixed.data, index, axis=axis)
    moving_slc = np.take(moving.data, index, axis=axis)
    img = _window_u8(fixed_slc, window)
    img[sobel_edge_mask(moving_slc)] = 255  # burn edges at max intensity
    from PIL import Image

    Image.fromarray(img, mode="L").save(args.out)
    print(f"wrote {img.shape[0]}x{img.shape[1]} overlay to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# suite


def _suite_worker(job) -> dict:
    seed, cfg_dict, params_dict, out_dims = job
    cfg = RegistrationConfig.from_dict(cfg_dict)
    params = PhantomParams.from_dict(params_dict)
    case = generate_phantom_pair(seed, params)
    settings = PreprocessSettings(
        target_spacing=params.spacing[0], out_dims=(out_dims,) * 3, pad_value=0.0
    )
    pair = preprocess_pair(case.fixed, case.moving, case.fixed_label, case.moving_label, settings)
    baseline = dice(pair.moving_label, pair.fixed_label)
    result = register(pair, dataclasses.replace(cfg, seed=seed))
    m = result.metrics
    return {
        "seed": seed,
        "dice": m.dice,
        "dice_before": baseline,
        "pct_neg_jacobian": m.pct_neg_jacobian,
        "field_rms": m.field_rms,
        "runtime_seconds": m.runtime_seconds,
    }


def run_suite(
    cases: int,
    seed0: int,
    cfg: RegistrationConfig,
    params: PhantomParams,
    out_dims: int,
    jobs: int = 1,
) -> list[dict]:
    jobs = max(1, min(jobs, cases))
    work = [(seed0 + i, cfg.to_dict(), params.to_dict(), out_dims) for i in range(cases)]
    if jobs == 1:
        return [_suite_worker(j) for j in work]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(jobs) as pool:
        return list(pool.map(_suite_worker, work))


def cmd_suite(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load_config(args)
    except (MplregError, json.JSONDecodeError, OSError) as e:
        return _die(str(e))
    params = PhantomParams(
        dims=(args.dims,) * 3,
        deformation_amplitude=args.amplitude,
        deformation_smoothness=args.smoothness,
        noise_sigma=args.noise_sigma,
    )
    env_jobs = os.environ.get("MPLREG_THREADS")
    jobs = args.jobs if args.jobs is not None else (int(env_jobs) if env_jobs else 1)
    started = _now()
    try:
        rows = run_suite(args.cases, args.seed, cfg, params, args.dims, jobs)
    except GenerationError as e:
        print(f"mplreg: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except DivergenceError as e:
        print(f"mplreg: divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED

    mean = {
        k: float(np.mean([r[k] for r in rows]))
        for k in ("dice", "dice_before", "pct_neg_jacobian", "field_rms", "runtime_seconds")
    }
    report = {"cases": rows, "mean": mean, "config": cfg.to_dict(), "phantom": params.to_dict()}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = [
        "| Method | DSC | %J |",
        "| --- | --- | --- |",
        f"| mplreg ({cfg.cascades} cascades) | {mean['dice']:.3f} | {mean['pct_neg_jacobian']:.2f}% |",
        f"| unregistered | {mean['dice_before']:.3f} | n/a |",
    ]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _write_manifest(
        out,
        {
            "command": "suite",
            "status": "ok",
            "config": cfg.to_dict(),
            "phantom": params.to_dict(),
            "cases": args.cases,
            "seed": args.seed,
            "jobs": jobs,
            "started": started,
            "finished": _now(),
        },
    )
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mplreg", description=__doc__)
    ap.add_argument("--version", action="version", version=f"mplreg {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register", help="register a moving volume onto a fixed volume")
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--moving", required=True)
    reg.add_argument("--fixed-label", required=True, dest="fixed_label")
    reg.add_argument("--moving-label", required=True, dest="moving_label")
    reg.add_argument("--config", help="JSON registration config")
    reg.add_argument("--out", required=True, help="output directory")
    reg.add_argument("--cascades", type=int, default=None, help="override cascade count")
    reg.add_argument("--seed", type=int, default=None)
    reg.add_argument("--target-spacing", type=float, default=5.0, dest="target_spacing")
    reg.add_argument("--out-dims", type=int, default=128, dest="out_dims")
    reg.add_argument("--roi-margin", type=int, default=2, dest="roi_margin")
    reg.add_argument("--pad-value", type=float, default=0.0, dest="pad_value")
    reg.set_defaults(func=cmd_register)

    met = sub.add_parser("metrics", help="evaluate overlap and field diagnostics")
    met.add_argument("--warped-label", required=True, dest="warped_label")
    met.add_argument("--fixed-label", required=True, dest="fixed_label")
    met.add_argument("--field", help="field path base (without .f32/.json)")
    met.add_argument("--out", help="also write the JSON report here")
    met.set_defaults(func=cmd_metrics)

    ph = sub.add_parser("phantom", help="generate a synthetic multimodal case")
    ph.add_argument("--seed", type=int, required=True)
    ph.add_argument("--out", required=True)
    ph.add_argument("--dims", type=int, default=64)
    ph.add_argument("--amplitude", type=float, default=4.0)
    ph.add_argument("--smoothness", type=float, default=8.0)
    ph.add_argument("--noise-sigma", type=float, default=0.02, dest="noise_sigma")
    ph.set_defaults(func=cmd_phantom)

    cg = sub.add_parser("check-grad", help="finite-difference check of all analytic gradients")
    cg.add_argument("--dims", type=int, default=6)
    cg.add_argument("--seed", type=int, default=0)
    cg.set_defaults(func=cmd_check_grad)

    ov = sub.add_parser("overlay", help="burn moving-image edges into a fixed-image slice PNG")
    ov.add_argument("--fixed", required=True)
    ov.add_argument("--moving", required=True)
    ov.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    ov.add_argument("--index", type=int, default=None)
    ov.add_argument("--out", required=True)
    ov.add_argument("--window", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    ov.set_defaults(func=cmd_overlay)

    su = sub.add_parser("suite", help="run N phantom cases and aggregate a report")
    su.add_argument("--cases", type=int, default=10)
    su.add_argument("--seed", type=int, default=0)
    su.add_argument("--out", required=True)
    su.add_argument("--config", help="JSON registration config")
    su.add_argument("--cascades", type=int, default=None)
    su.add_argument("--jobs", type=int, default=None, help="parallel cases (default MPLREG_THREADS or 1)")
    su.add_argument("--dims", type=int, default=64)
    su.add_argument("--amplitude", type=float, default=4.0)
    su.add_argument("--smoothness", type=float, default=8.0)
    su.add_argument("--noise-sigma", type=float, default=0.02, dest="noise_sigma")
    su.set_defaults(func=cmd_suite)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
