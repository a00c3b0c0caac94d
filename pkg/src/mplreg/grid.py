"""Grid metadata shared by volumes, masks and displacement fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError


@dataclass(frozen=True)
class GridMeta:
    """Voxel grid geometry: axis sizes, mm spacing, world origin of voxel (0,0,0)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be 3 positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive finite reals, got {self.spacing}")
        if len(self.origin) != 3 or any(not np.isfinite(o) for o in self.origin):
            raise ValueError(f"origin must be 3 finite reals, got {self.origin}")

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def compatible(self, other: "GridMeta") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )


def require_same_grid(a, b, what: str = "operands") -> None:
    """Raise GridMismatchError unless the two grids are identical."""
    ga = a if isinstance(a, GridMeta) else a.grid
    gb = b if isinstance(b, GridMeta) else b.grid
    if not ga.compatible(gb):
        raise GridMismatchError(f"{what} live on different grids: {ga} vs {gb}")
