"""Discrete grid field of a molecule.

Each atom carries a cubic lattice of spacing ``g`` centred on its nucleus;
the points of that lattice within distance ``s`` of the nucleus belong to the
field.  The union over atoms is deduplicated and sorted lexicographically, so
the field depends only on the set of atoms, not on their order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from qdf.chem import Molecule

# points closer than this (in Å) are one point
_SNAP = 1e-8


@dataclass(frozen=True)
class GridField:
    points: np.ndarray  # (G, 3), Å

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count


@lru_cache(maxsize=64)
def ball_offsets(s: float, g: float) -> np.ndarray:
    """Integer lattice offsets ``k`` with ``|k| * g <= s``, lexicographic order."""
    n = int(np.floor(s / g + 1e-9))
    r = np.arange(-n, n + 1)
    k = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = (k * k).sum(axis=1) * (g * g) <= s * s * (1.0 + 1e-12)
    out = k[inside]
    out.setflags(write=False)
    return out


def build_grid(molecule: Molecule, s: float = 0.75, g: float = 0.3) -> GridField:
    """Grid points within ``s`` Å of any atom, sampled at interval ``g`` Å."""
    if not (s > 0 and g > 0):
        raise ValueError(f"sphere radius and grid interval must be positive (s={s}, g={g})")
    offsets = ball_offsets(float(s), float(g)) * g
    pts = (molecule.positions[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    keys = np.round(pts / _SNAP).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return GridField(pts[first])


def write_grid(grid: GridField, path) -> None:
    """Dump points as ``x<TAB>y<TAB>z`` lines for external viewers."""
    np.savetxt(path, grid.points, delimiter="\t", header="x\ty\tz", comments="", fmt="%.10f")
