"""Gaussian-type orbital dictionary and the GTO matrix.

Every element owns an ordered list of orbital specs.  Each spec has one
learnable exponent ``zeta = exp(log_zeta)`` and one learnable coefficient
vector of length ``N``; atoms of the same element share them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from qdf.chem import Molecule
from qdf.grid import GridField
from qdf.tensor import Tensor


@dataclass(frozen=True)
class OrbitalSpec:
    element: str
    label: str
    q: int

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"principal quantum number must be >= 1, got {self.q}")


BasisSkeleton = dict[str, list[OrbitalSpec]]

# (label, q, multiplicity); 2p is one radial function, no angular part
DEFAULT_SCHEME: dict[str, list[tuple[str, int, int]]] = {
    "H": [("1s", 1, 4)],
    "C": [("1s", 1, 6), ("2s", 2, 4), ("2p", 2, 4)],
    "N": [("1s", 1, 6), ("2s", 2, 4), ("2p", 2, 4)],
    "O": [("1s", 1, 6), ("2s", 2, 4), ("2p", 2, 4)],
    "F": [("1s", 1, 6), ("2s", 2, 4), ("2p", 2, 4)],
}


def expand_scheme(scheme: Mapping[str, Sequence[Sequence]]) -> BasisSkeleton:
    out: BasisSkeleton = {}
    for element, shells in scheme.items():
        specs = []
        for label, q, mult in shells:
            specs += [OrbitalSpec(element, f"{label}({k + 1})", int(q)) for k in range(int(mult))]
        if not specs:
            raise ValueError(f"element {element} has no orbital specs")
        out[element] = specs
    return out


def default_basis_spec() -> BasisSkeleton:
    """H: 4 x 1s; C, N, O, F: 6 x 1s + 4 x 2s + 4 x 2p."""
    return expand_scheme(DEFAULT_SCHEME)


def load_basis_file(path) -> BasisSkeleton:
    """Read ``element: [[label, q, multiplicity], ...]`` from a YAML file."""
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping element -> shells")
    return expand_scheme(data)


def skeleton_to_scheme(skeleton: BasisSkeleton) -> dict[str, list[list]]:
    """Inverse of :func:`expand_scheme` (for checkpoints)."""
    scheme: dict[str, list[list]] = {}
    for element, specs in skeleton.items():
        rows: list[list] = []
        for spec in specs:
            label = spec.label.split("(")[0]
            if rows and rows[-1][0] == label and rows[-1][1] == spec.q:
                rows[-1][2] += 1
            else:
                rows.append([label, spec.q, 1])
        scheme[element] = rows
    return scheme


class MissingOrbitalsError(KeyError):
    """A molecule contains an element the basis does not describe."""


class BasisSet:
    """Learnable exponents and coefficient vectors for every orbital spec.

    Attributes:
        skeleton: element -> ordered specs.
        log_zeta: Tensor (S,), ``zeta = exp(log_zeta)``.
        coefficients: Tensor (S, N); row ``k`` is spec ``k``'s vector.
    """

    def __init__(self, skeleton: BasisSkeleton, n_dim: int, rng: np.random.Generator,
                 zeta_range: tuple[float, float] = (0.5, 2.0)):
        self.skeleton = {el: list(specs) for el, specs in skeleton.items()}
        self.n_dim = n_dim
        self.specs: list[OrbitalSpec] = []
        self.offsets: dict[str, np.ndarray] = {}
        for element, specs in self.skeleton.items():
            start = len(self.specs)
            self.specs += specs
            self.offsets[element] = np.arange(start, len(self.specs))
        self.q = np.array([s.q for s in self.specs], dtype=np.int64)
        zeta0 = rng.uniform(*zeta_range, size=len(self.specs))
        self.log_zeta = Tensor(np.log(zeta0), requires_grad=True, name="basis.log_zeta")
        c0 = rng.standard_normal((len(self.specs), n_dim))
        self.coefficients = Tensor(c0, requires_grad=True, name="basis.coefficients")
        project_coefficients(self.coefficients.data)

    @property
    def n_specs(self) -> int:
        return len(self.specs)

    @property
    def zeta(self) -> np.ndarray:
        return np.exp(self.log_zeta.data)

    def parameters(self) -> list[Tensor]:
        return [self.log_zeta, self.coefficients]


def project_coefficients(c: np.ndarray) -> np.ndarray:
    """Rescale every column of ``c`` to unit norm, in place (no graph node)."""
    norms = np.linalg.norm(c, axis=0)
    if np.any(norms == 0):
        raise ZeroDivisionError("coefficient matrix has a zero column")
    c /= norms
    return c


@dataclass(frozen=True)
class BasisInstance:
    """Basis functions of one molecule, ordered by (atom, spec)."""

    centers: np.ndarray      # (B, 3)
    atom_index: np.ndarray   # (B,)
    spec_index: np.ndarray   # (B,) into BasisSet.specs
    q: np.ndarray            # (B,)

    @property
    def count(self) -> int:
        return int(self.spec_index.shape[0])


def instantiate(molecule: Molecule, basis: BasisSet | BasisSkeleton) -> BasisInstance:
    """One entry per (atom, spec), centred on the atom."""
    skeleton = basis.skeleton if isinstance(basis, BasisSet) else basis
    offsets = basis.offsets if isinstance(basis, BasisSet) else _skeleton_offsets(skeleton)
    atom_index, spec_index, q = [], [], []
    for m, el in enumerate(molecule.elements):
        if el not in skeleton:
            raise MissingOrbitalsError(f"basis has no orbitals for element {el!r}")
        for k, spec in zip(offsets[el], skeleton[el]):
            atom_index.append(m)
            spec_index.append(k)
            q.append(spec.q)
    atom_index = np.array(atom_index, dtype=np.intp)
    return BasisInstance(
        centers=molecule.positions[atom_index],
        atom_index=atom_index,
        spec_index=np.array(spec_index, dtype=np.intp),
        q=np.array(q, dtype=np.int64),
    )


def _skeleton_offsets(skeleton: BasisSkeleton) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for el, specs in skeleton.items():
        out[el] = np.arange(start, start + len(specs))
        start += len(specs)
    return out


def double_factorial(n: int) -> int:
    """n!! with (-1)!! = 0!! = 1."""
    return math.prod(range(n, 0, -2)) if n > 0 else 1


# (2q-3)!! indexed by q
_DFACT = np.array([1.0] + [float(double_factorial(2 * q - 3)) for q in range(1, 16)])


def gto_normalizer(q, zeta):
    """Z(q, zeta) = sqrt((2q-3)!! sqrt(pi/2) / (2^(2(q-1)) zeta^((2q-1)/2))).

    Vectorized over matching arrays of ``q`` and ``zeta``.
    """
    q_arr = np.asarray(q, dtype=np.int64)
    zeta = np.asarray(zeta, dtype=float)
    if np.any(zeta <= 0):
        raise ValueError("orbital exponent must be positive")
    if np.any(q_arr < 1):
        raise ValueError("principal quantum number must be >= 1")
    if np.any(q_arr >= _DFACT.shape[0]):
        raise ValueError("principal quantum number too large")
    dfact = _DFACT[q_arr]
    z = np.sqrt(dfact * math.sqrt(math.pi / 2)
                / (2.0 ** (2 * (q_arr - 1)) * zeta ** ((2 * q_arr - 1) / 2)))
    return float(z) if z.ndim == 0 else z


def gto_value(q, zeta, distance):
    """phi = D^(q-1) exp(-zeta D^2) / Z(q, zeta), with 0^0 = 1."""
    d = np.asarray(distance, dtype=float)
    q_arr = np.asarray(q)
    radial = np.power(d, q_arr - 1)  # numpy gives 0**0 == 1
    out = radial * np.exp(-np.asarray(zeta) * d * d) / gto_normalizer(q, zeta)
    return float(out) if np.ndim(out) == 0 else out


def gto_from_distances(distances: np.ndarray, spec_index: np.ndarray, q: np.ndarray,
                       log_zeta: Tensor) -> Tensor:
    """GTO matrix (G, B) from grid-to-centre distances, differentiable in log_zeta.

    d phi / d zeta = phi * ((2q - 1) / (4 zeta) - D^2), the first term coming
    from the normalizer.
    """
    zeta_all = np.exp(log_zeta.data)
    zeta = zeta_all[spec_index]
    d2 = distances * distances
    radial = distances ** (q - 1)
    phi = radial * np.exp(-zeta * d2) / gto_normalizer(q, zeta)

    def backward(g):
        dphi_dzeta = phi * ((2 * q - 1) / (4.0 * zeta) - d2)
        per_entry = (g * dphi_dzeta).sum(axis=0) * zeta  # chain rule through exp
        grad = np.bincount(spec_index, weights=per_entry, minlength=zeta_all.shape[0])
        return (grad,)

    return Tensor.from_op(phi, (log_zeta,), backward)


def grid_distances(grid_points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = grid_points[:, None, :] - centers[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def gto_matrix(grid: GridField, inst: BasisInstance, basis: BasisSet) -> Tensor:
    """Entry (i, n) = phi_n(|r_i - R_n|)."""
    return gto_from_distances(grid_distances(grid.points, inst.centers), inst.spec_index,
                              inst.q, basis.log_zeta)
