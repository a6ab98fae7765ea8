"""The quantum deep field model.

Forward path for a batch of molecules, all rows of all grids stacked::

    GTO (G_m x B_m)  --LCAO-->  Psi (G x N)  --normalize-->  Psi'
    Psi'  --ReLU MLP, sum per molecule, linear head-->  E'
    rho = sum_n Psi'^2  --pointwise MLP-->  V'

The basis parameters (exponents, coefficients) belong to both the energy
parameter group and the potential parameter group.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from qdf import tensor as T
from qdf.basis import (BasisInstance, BasisSet, BasisSkeleton, default_basis_spec,
                       gto_from_distances)
from qdf.chem import Molecule, count_electrons  # noqa: F401 - re-exported
from qdf.grid import GridField
from qdf.nn import Linear
from qdf.tensor import Tensor


class ZeroColumnError(ZeroDivisionError):
    """An orbital column vanished on a molecule's grid; normalization is undefined."""


@dataclass
class ModelConfig:
    n_orbitals: int = 200      # N: coefficient / molecular-orbital dimension
    hk_width: int = 200        # N': hidden width of the HK map
    energy_layers: int = 3     # L
    hk_layers: int = 3         # L'
    normalize: str = "differentiable"  # or "projection" (stop-gradient rescale)

    def __post_init__(self):
        if self.normalize not in ("differentiable", "projection"):
            raise ValueError(f"unknown normalize mode {self.normalize!r}")
        for key in ("n_orbitals", "hk_width", "energy_layers", "hk_layers"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class QDFModel:
    def __init__(self, config: ModelConfig, skeleton: BasisSkeleton | None = None,
                 seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        n, h = config.n_orbitals, config.hk_width
        self.basis = BasisSet(skeleton or default_basis_spec(), n, rng)
        self.energy_hidden = [Linear(n, n, rng, f"energy.hidden{i}")
                              for i in range(config.energy_layers)]
        self.energy_head = Linear(n, 1, rng, "energy.head")
        self.hk_input = Linear(1, h, rng, "hk.input")
        self.hk_hidden = [Linear(h, h, rng, f"hk.hidden{i}") for i in range(config.hk_layers)]
        self.hk_head = Linear(h, 1, rng, "hk.head")

    def basis_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.basis.parameters()}

    def energy_parameters(self) -> dict[str, Tensor]:
        """Theta_E: basis + energy functional."""
        out = self.basis_parameters()
        for layer in [*self.energy_hidden, self.energy_head]:
            out.update({p.name: p for p in layer.parameters()})
        return out

    def potential_parameters(self) -> dict[str, Tensor]:
        """Theta_V: basis + HK map."""
        out = self.basis_parameters()
        for layer in [self.hk_input, *self.hk_hidden, self.hk_head]:
            out.update({p.name: p for p in layer.parameters()})
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.energy_parameters()
        out.update(self.potential_parameters())
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))


def lcao_forward(gto: Tensor, inst: BasisInstance, basis: BasisSet) -> Tensor:
    """Psi = GTO @ C, with C's rows gathered from the shared coefficient table."""
    if gto.shape[1] != inst.count:
        raise T.ShapeError(f"GTO matrix has {gto.shape[1]} columns, instance has {inst.count}")
    coeff = T.take(basis.coefficients, inst.spec_index)
    return T.matmul(gto, coeff)


def normalize_psi(psi: Tensor, n_elec, segment_ids: np.ndarray | None = None,
                  mode: str = "differentiable") -> Tensor:
    """Rescale each molecule's orbital columns to norm sqrt(N_elec / N).

    Afterwards the squared entries of each molecule's block sum to N_elec.
    ``mode="projection"`` applies the same factor as a constant.
    """
    n_elec = np.atleast_1d(np.asarray(n_elec, dtype=float))
    if segment_ids is None:
        segment_ids = np.zeros(psi.shape[0], dtype=np.intp)
    n_seg = n_elec.shape[0]
    n_dim = psi.shape[1]
    sq_norms = T.segment_sum(T.square(psi), segment_ids, n_seg)  # (n_seg, N)
    if np.any(sq_norms.data == 0):
        bad = sorted(set(np.nonzero(sq_norms.data == 0)[0].tolist()))
        raise ZeroColumnError(f"zero orbital column in segment(s) {bad}")
    target = np.sqrt(n_elec / n_dim)[:, None]
    if mode == "projection":
        factor = Tensor(target / np.sqrt(sq_norms.data))
    else:
        factor = T.div(Tensor(target), T.sqrt(sq_norms))
    return T.mul(psi, T.take(factor, segment_ids))


def density(psi: Tensor) -> Tensor:
    """rho(r_i) = sum_n psi_n(r_i)^2, shape (G,)."""
    return T.sum(T.square(psi), axis=1)


def external_potential(molecule: Molecule, grid: GridField | np.ndarray) -> np.ndarray:
    """V(r_i) = -sum_m Z_m exp(-|r_i - R_m|^2); a fixed target, no gradient."""
    points = grid.points if isinstance(grid, GridField) else np.asarray(grid)
    diff = points[:, None, :] - molecule.positions[None, :, :]
    return -(molecule.charges[None, :] * np.exp(-(diff * diff).sum(axis=-1))).sum(axis=1)


def energy_functional(model: QDFModel, psi: Tensor, segment_ids: np.ndarray,
                      n_segments: int) -> Tensor:
    """E' per molecule: ReLU layers per grid point, sum over the grid, linear head."""
    h = psi
    for layer in model.energy_hidden:
        h = T.relu(layer(h))
    pooled = T.segment_sum(h, segment_ids, n_segments)
    return T.reshape(model.energy_head(pooled), (n_segments,))


def hk_map(model: QDFModel, rho: Tensor) -> Tensor:
    """V'(r_i) from rho(r_i) alone: linear lift, ReLU layers, linear head."""
    h = model.hk_input(T.reshape(rho, (rho.shape[0], 1)))
    for layer in model.hk_hidden:
        h = T.relu(layer(h))
    return T.reshape(model.hk_head(h), (rho.shape[0],))


def loss_E(pred: Tensor, target) -> Tensor:
    """Mean over molecules of (E - E')^2."""
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    return T.mean(T.square(T.sub(pred, Tensor(target))))


def loss_V(pred: Tensor, target, segment_ids: np.ndarray | None = None,
           n_segments: int = 1) -> Tensor:
    """Per molecule sum over grid points of (V - V')^2, averaged over molecules."""
    target = np.asarray(target, dtype=float)
    if target.shape != pred.shape:
        raise T.ShapeError(f"potential target {target.shape} vs prediction {pred.shape}")
    total = T.sum(T.square(T.sub(pred, Tensor(target))))
    return T.mul(total, 1.0 / n_segments)


@dataclass
class MoleculeInputs:
    """Parameter-independent inputs of one molecule (cached at preprocess time)."""

    id: str
    n_atoms: int
    n_electrons: int
    distances: np.ndarray    # (G, M): grid point to atom
    instance: BasisInstance
    potential: np.ndarray    # (G,)
    target: float = float("nan")

    @property
    def grid_size(self) -> int:
        return int(self.distances.shape[0])


def prepare_inputs(molecule: Molecule, grid: GridField, inst: BasisInstance,
                   target: float = float("nan")) -> MoleculeInputs:
    diff = grid.points[:, None, :] - molecule.positions[None, :, :]
    return MoleculeInputs(
        id=molecule.id,
        n_atoms=molecule.n_atoms,
        n_electrons=count_electrons(molecule),
        distances=np.sqrt((diff * diff).sum(axis=-1)),
        instance=inst,
        potential=external_potential(molecule, grid),
        target=target,
    )


@dataclass
class ForwardResult:
    psi: Tensor
    segment_ids: np.ndarray
    n_segments: int
    n_electrons: np.ndarray

    def electron_counts(self) -> np.ndarray:
        """sum_i rho(r_i) per molecule (from the normalized orbitals)."""
        per_row = (self.psi.data ** 2).sum(axis=1)
        return np.bincount(self.segment_ids, weights=per_row, minlength=self.n_segments)


def orbitals(model: QDFModel, mols: list[MoleculeInputs]) -> ForwardResult:
    """Normalized orbital matrix for a batch, rows stacked molecule by molecule."""
    blocks = []
    for mol in mols:
        inst = mol.instance
        gto = gto_from_distances(mol.distances[:, inst.atom_index], inst.spec_index, inst.q,
                                 model.basis.log_zeta)
        blocks.append(lcao_forward(gto, inst, model.basis))
    psi = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
    sizes = [m.grid_size for m in mols]
    seg = np.repeat(np.arange(len(mols)), sizes)
    n_elec = np.array([m.n_electrons for m in mols], dtype=float)
    psi = normalize_psi(psi, n_elec, seg, mode=model.config.normalize)
    return ForwardResult(psi, seg, len(mols), n_elec)


def predict_energy(model: QDFModel, fwd: ForwardResult) -> Tensor:
    return energy_functional(model, fwd.psi, fwd.segment_ids, fwd.n_segments)


def predict_potential(model: QDFModel, fwd: ForwardResult) -> Tensor:
    return hk_map(model, density(fwd.psi))


def energy_loss(model: QDFModel, mols: list[MoleculeInputs]) -> tuple[Tensor, ForwardResult]:
    fwd = orbitals(model, mols)
    pred = predict_energy(model, fwd)
    return loss_E(pred, [m.target for m in mols]), fwd


def potential_loss(model: QDFModel, mols: list[MoleculeInputs]) -> tuple[Tensor, ForwardResult]:
    fwd = orbitals(model, mols)
    pred = predict_potential(model, fwd)
    target = np.concatenate([m.potential for m in mols])
    return loss_V(pred, target, fwd.segment_ids, fwd.n_segments), fwd
