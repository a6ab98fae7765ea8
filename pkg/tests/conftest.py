from __future__ import annotations

import os

# single-threaded BLAS so floating-point reductions are reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from qdf.basis import default_basis_spec, instantiate
from qdf.chem import Atom, Molecule, parse_xyz_record, split_records
from qdf.grid import build_grid
from qdf.model import ModelConfig, QDFModel, prepare_inputs
from qdf.toydata import generate

WATER_XYZ = """3
gdb 1\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0.021\t-76.40\t-76.39\t-76.38\t-76.42\t6.0
O\t0.0\t0.0\t0.0\t-0.6
H\t0.7572\t0.5865\t0.0\t0.3
H\t-0.7572\t0.5865\t0.0\t0.3
1600.0\t3700.0\t3800.0
O\tO
InChI=1S/H2O/h1H2\tInChI=1S/H2O/h1H2
"""


def water() -> Molecule:
    return Molecule("water", (Atom("O", (0.0, 0.0, 0.0)),
                              Atom("H", (0.7572, 0.5865, 0.0)),
                              Atom("H", (-0.7572, 0.5865, 0.0))))


def toy_records(count: int, seed: int = 0, **kw):
    text = generate(count, seed=seed, **kw)
    return [parse_xyz_record(t) for _, t in split_records(text.splitlines(True))]


def toy_inputs(count: int, seed: int = 0, s: float = 0.75, g: float = 0.3, max_heavy: int = 3):
    from qdf.chem import compute_target
    from qdf.toydata import QM9_ATOM_REFS_U0
    skeleton = default_basis_spec()
    out = []
    for r in toy_records(count, seed, max_heavy=max_heavy):
        mol = r.molecule
        out.append(prepare_inputs(mol, build_grid(mol, s, g), instantiate(mol, skeleton),
                                  compute_target(r, "atomization_energy_0K", QM9_ATOM_REFS_U0)))
    return out


def small_model(n: int = 8, layers: int = 2, seed: int = 0, **kw) -> QDFModel:
    return QDFModel(ModelConfig(n, n, layers, layers, **kw), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_xyz(tmp_path_factory):
    path = tmp_path_factory.mktemp("raw") / "toy.xyz"
    path.write_text(generate(10, seed=3, max_heavy=3), encoding="utf-8")
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
