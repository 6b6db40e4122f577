"""Uniform cell-centered grids on an interval or a rectangle.

Conventions used throughout the package:

* 1D: cells indexed [ix], array shape (nx,); cell centers at (ix + 1/2) dx.
* 2D: cells indexed [iy, ix], array shape (ny, nx); extents and cell counts
  are stored in (x, y) order to match the config keys.
* Fields with components carry them on trailing axes, e.g. a w-field has
  shape (*grid.shape, n-1).

Quadrature is midpoint: integrals are plain sums times the cell volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Grid"]


@dataclass(frozen=True)
class Grid:
    """Geometry of a uniform cell-centered grid (1D or 2D)."""

    extents: tuple[float, ...]
    cells: tuple[int, ...]

    def __post_init__(self):
        extents = tuple(float(e) for e in self.extents)
        cells = tuple(int(n) for n in self.cells)
        if len(extents) not in (1, 2) or len(cells) != len(extents):
            raise ValueError("grid must be 1D or 2D with matching extents/cells")
        if any(e <= 0.0 or not np.isfinite(e) for e in extents):
            raise ValueError("extents must be positive and finite")
        if any(n < 4 for n in cells):
            raise ValueError("need at least 4 cells per axis")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def line(cls, length: float, nx: int) -> "Grid":
        return cls(extents=(length,), cells=(nx,))

    @classmethod
    def rectangle(cls, lx: float, ly: float, nx: int, ny: int) -> "Grid":
        return cls(extents=(lx, ly), cells=(nx, ny))

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / n for e, n in zip(self.extents, self.cells))

    @property
    def shape(self) -> tuple[int, ...]:
        """Array shape of a scalar cell field: (nx,) in 1D, (ny, nx) in 2D."""
        return (self.cells[0],) if self.dim == 1 else (self.cells[1], self.cells[0])

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def measure(self) -> float:
        """Volume of the whole domain."""
        return float(np.prod(self.extents))

    def axis_centers(self, axis: int) -> np.ndarray:
        """Cell-center coordinates along one axis (0 = x, 1 = y)."""
        h = self.spacing[axis]
        return (np.arange(self.cells[axis]) + 0.5) * h

    def center_mesh(self) -> tuple[np.ndarray, ...]:
        """Center coordinate arrays broadcast to `shape` ((X,) or (X, Y))."""
        if self.dim == 1:
            return (self.axis_centers(0),)
        x = self.axis_centers(0)
        y = self.axis_centers(1)
        xx, yy = np.meshgrid(x, y)  # shape (ny, nx)
        return (xx, yy)

    def integrate(self, field: np.ndarray):
        """Midpoint quadrature over the spatial axes (leading `dim` axes)."""
        spatial = tuple(range(self.dim))
        return np.asarray(field).sum(axis=spatial) * self.cell_volume
