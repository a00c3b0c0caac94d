"""Synthetic multimodal phantom pairs with known ground-truth deformation.

One anatomy (body envelope, two ellipsoidal lungs, spherical vessels inside)
is rendered under two intensity mappings: modality A plays the CT role and
modality B applies a monotone-decreasing nonlinear transfer, so the two
renders are strongly anti-correlated and defeat linear similarity measures
while staying mutually informative. The moving image is the B render warped
by a random smooth displacement field that is kept comfortably invertible by
rejection sampling on its Jacobian.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .filters import filter_array
from .grid import GridMeta
from .nifti import read_nifti, write_nifti
from .transform import DisplacementField, jacobian_determinant, load_field, save_field, warp
from .volume import LabelMask, Volume


@dataclass(frozen=True)
class PhantomParams:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (5.0, 5.0, 5.0)
    deformation_amplitude: float = 4.0
    deformation_smoothness: float = 8.0
    noise_sigma: float = 0.02
    intensity_gamma: float = 1.5  # modality B transfer: v -> (1 - v) ** gamma
    vessels_per_lung: int = 5
    render_blur: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.deformation_amplitude < 0:
            raise ValueError("deformation amplitude must be >= 0")
        if self.deformation_smoothness <= 0:
            raise ValueError("deformation smoothness must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        d = dict(d)
        d["dims"] = tuple(d.get("dims", (64, 64, 64)))
        d["spacing"] = tuple(d.get("spacing", (5.0, 5.0, 5.0)))
        return cls(**d)


@dataclass
class PhantomCase:
    fixed: Volume
    moving: Volume
    fixed_label: LabelMask
    moving_label: LabelMask
    true_field: DisplacementField
    seed: int
    params: PhantomParams
    modality_b: Volume = field(default=None, repr=False)  # unwarped B render


def random_smooth_field(
    seed, dims, amplitude: float, smoothness: float, grid: GridMeta | None = None
) -> DisplacementField:
    """White noise smoothed per component, rescaled to a max displacement.

    The result is rejected and redrawn (up to 20 times) until its minimum
    Jacobian determinant exceeds 0.05, so emitted fields are invertible with
    margin.
    """
    if amplitude < 0 or smoothness < 0:
        raise ValueError("amplitude and smoothness must be >= 0")
    dims = tuple(int(d) for d in dims)
    if grid is None:
        grid = GridMeta(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    if amplitude == 0.0:
        return DisplacementField.zero(grid)
    rng = np.random.default_rng(seed)
    # Filter a padded noise grid and crop the centre: filtering the bare grid
    # would inflate the variance near the replicated border and the global
    # rescale would then flatten the interior to almost nothing.
    pad = int(np.ceil(3.0 * smoothness))
    big = tuple(d + 2 * pad for d in dims)
    core = tuple(slice(pad, pad + d) for d in dims)
    for _ in range(20):
        u = np.empty(dims + (3,))
        for c in range(3):
            u[..., c] = filter_array(rng.standard_normal(big), smoothness)[core]
        mag = np.sqrt(np.sum(u * u, axis=-1)).max()
        if mag == 0.0:
            continue
        u *= amplitude / mag
        fld = DisplacementField(grid, u)
        if jacobian_determinant(fld).data.min() > 0.05:
            return fld
    raise GenerationError(
        f"no invertible field after 20 draws (amplitude={amplitude}, smoothness={smoothness})"
    )


def _ellipsoid(dims, center, radii) -> np.ndarray:
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    q = (
        ((ii - center[0]) / radii[0]) ** 2
        + ((jj - center[1]) / radii[1]) ** 2
        + ((kk - center[2]) / radii[2]) ** 2
    )
    return q <= 1.0


def _render_anatomy(rng: np.random.Generator, p: PhantomParams):
    """Modality-A render (clean, blurred) and the binary lung mask."""
    dims = np.asarray(p.dims)
    c = (dims - 1) / 2.0

    def jit(scale):
        return 1.0 + scale * rng.uniform(-1.0, 1.0)

    img = np.full(p.dims, 0.02)
    body_r = (0.44 * dims[0] * jit(0.04), 0.42 * dims[1] * jit(0.04), 0.46 * dims[2] * jit(0.04))
    body = _ellipsoid(p.dims, c, body_r)
    img[body] = 0.55

    label = np.zeros(p.dims)
    for side in (-1.0, 1.0):
        lc = (
            c[0] + side * 0.21 * dims[0] * jit(0.06),
            c[1] + 0.03 * dims[1] * rng.uniform(-1.0, 1.0),
            c[2] + 0.03 * dims[2] * rng.uniform(-1.0, 1.0),
        )
        lr = (
            0.135 * dims[0] * jit(0.08),
            0.17 * dims[1] * jit(0.08),
            0.26 * dims[2] * jit(0.08),
        )
        lung = _ellipsoid(p.dims, lc, lr)
        img[lung] = 0.10
        label[lung] = 1.0
        for _ in range(p.vessels_per_lung):
            off = rng.uniform(-0.55, 0.55, size=3) * np.asarray(lr)
            vr = rng.uniform(0.025, 0.05) * dims[0]
            vessel = _ellipsoid(p.dims, np.asarray(lc) + off, (vr, vr, vr))
            img[vessel & lung] = 0.80
    return filter_array(img, p.render_blur), label


def generate_phantom_pair(seed: int, params: PhantomParams = PhantomParams()) -> PhantomCase:
    """Deterministic multimodal pair plus ground-truth deformation for one seed."""
    ss = np.random.SeedSequence(int(seed))
    anat_ss, field_ss = ss.spawn(2)
    rng = np.random.default_rng(anat_ss)
    grid = GridMeta(params.dims, params.spacing, (0.0, 0.0, 0.0))

    a_clean, label_arr = _render_anatomy(rng, params)
    fixed = Volume(grid, np.clip(a_clean + rng.normal(0.0, params.noise_sigma, params.dims), 0, 1))
    b_render = np.clip(
        (1.0 - a_clean) ** params.intensity_gamma
        + rng.normal(0.0, params.noise_sigma, params.dims),
        0,
        1,
    )
    modality_b = Volume(grid, b_render)
    fixed_label = LabelMask(grid, label_arr)

    true_field = random_smooth_field(
        field_ss, params.dims, params.deformation_amplitude, params.deformation_smoothness, grid
    )
    moving = warp(modality_b, true_field)
    moving_label = LabelMask(grid, (warp(fixed_label, true_field).data > 0.5).astype(np.float64))
    return PhantomCase(
        fixed=fixed,
        moving=moving,
        fixed_label=fixed_label,
        moving_label=moving_label,
        true_field=true_field,
        seed=int(seed),
        params=params,
        modality_b=modality_b,
    )


CASE_FILES = {
    "fixed": "fixed.nii",
    "moving": "moving.nii",
    "fixed_label": "fixed_label.nii",
    "moving_label": "moving_label.nii",
}


def save_case(case: PhantomCase, out_dir) -> Path:
    """Write the four volumes, the true field, and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(case.fixed, out / CASE_FILES["fixed"])
    write_nifti(case.moving, out / CASE_FILES["moving"])
    write_nifti(case.fixed_label, out / CASE_FILES["fixed_label"])
    write_nifti(case.moving_label, out / CASE_FILES["moving_label"])
    save_field(case.true_field, out / "true_field")
    manifest = {
        "kind": "mplreg-phantom-case",
        "seed": case.seed,
        "params": case.params.to_dict(),
        "files": dict(CASE_FILES, true_field="true_field.f32"),
    }
    (out / "case.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_case(case_dir) -> PhantomCase:
    d = Path(case_dir)
    manifest = json.loads((d / "case.json").read_text())
    params = PhantomParams.from_dict(manifest["params"])
    return PhantomCase(
        fixed=read_nifti(d / CASE_FILES["fixed"]),
        moving=read_nifti(d / CASE_FILES["moving"]),
        fixed_label=read_nifti(d / CASE_FILES["fixed_label"], as_label=True),
        moving_label=read_nifti(d / CASE_FILES["moving_label"], as_label=True),
        true_field=load_field(d / "true_field"),
        seed=int(manifest["seed"]),
        params=params,
    )
