"""Evaluation metrics: Dice overlap and negative-Jacobian percentage."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grid import require_same_grid
from .transform import DisplacementField, fraction_negative_jacobian
from .volume import LabelMask


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    pct_neg_jacobian: float  # percent, 0..100
    field_rms: float         # voxels
    runtime_seconds: float

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "dice": self.dice,
            "pct_neg_jacobian": self.pct_neg_jacobian,
            "field_rms": self.field_rms,
        }
        if include_runtime:
            d["runtime_seconds"] = self.runtime_seconds
        return d

    def to_json(self, include_runtime: bool = False) -> str:
        # Deterministic serialisation: runtime is excluded by default so two
        # identical runs produce byte-identical files.
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, indent=2) + "\n"

    def markdown_row(self, method: str = "mplreg") -> str:
        return f"| {method} | {self.dice:.3f} | {self.pct_neg_jacobian:.2f}% |"


def dice(a: LabelMask, b: LabelMask, threshold: float = 0.5) -> float:
    """Dice overlap of the two masks binarised at ``threshold``; empty vs empty is 1."""
    require_same_grid(a, b, "masks")
    am = a.data > threshold
    bm = b.data > threshold
    na = int(np.count_nonzero(am))
    nb = int(np.count_nonzero(bm))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(am & bm))
    return 2.0 * inter / (na + nb)


def compute_report(
    final_field: DisplacementField,
    warped_label: LabelMask,
    fixed_label: LabelMask,
    runtime_seconds: float = 0.0,
) -> MetricsReport:
    return MetricsReport(
        dice=dice(warped_label, fixed_label),
        pct_neg_jacobian=100.0 * fraction_negative_jacobian(final_field),
        field_rms=final_field.rms(),
        runtime_seconds=float(runtime_seconds),
    )


def evaluate(result, fixed_label: LabelMask) -> MetricsReport:
    """Metrics of a finished registration against the fixed label."""
    return compute_report(
        result.final_field, result.warped_label, fixed_label, result.runtime_seconds
    )
