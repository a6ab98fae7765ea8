import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from qdf.basis import (BasisSet, MissingOrbitalsError, default_basis_spec, double_factorial,
                       expand_scheme, gto_from_distances, gto_matrix, gto_normalizer, gto_value,
                       instantiate, load_basis_file, project_coefficients, skeleton_to_scheme)
from qdf.chem import Atom, Molecule
from qdf.grid import GridField, build_grid
from qdf.tensor import Tensor

from conftest import water


def quad_z(q, zeta, lower=-np.inf):
    """sqrt of the integral of |D^(q-1) exp(-zeta D^2)|^2 by adaptive quadrature."""
    val, _ = quad(lambda d: (d ** (q - 1) * math.exp(-zeta * d * d)) ** 2, lower, np.inf,
                  epsabs=0.0, epsrel=1e-13, limit=200)
    return math.sqrt(val)


def test_spec_counts():
    sk = default_basis_spec()
    assert len(sk["H"]) == 4
    assert len(sk["O"]) == 14
    assert [s.q for s in sk["O"]] == [1] * 6 + [2] * 8
    assert instantiate(water(), sk).count == 22


def test_shared_specs_for_same_element():
    h2 = Molecule("h2", (Atom("H", (0, 0, 0)), Atom("H", (0, 0, 0.74))))
    inst = instantiate(h2, default_basis_spec())
    assert inst.count == 8
    np.testing.assert_array_equal(inst.spec_index[:4], inst.spec_index[4:])
    np.testing.assert_array_equal(inst.atom_index, [0] * 4 + [1] * 4)
    assert not np.array_equal(inst.centers[0], inst.centers[4])


def test_missing_element():
    sk = expand_scheme({"H": [["1s", 1, 4]]})
    with pytest.raises(MissingOrbitalsError):
        instantiate(water(), sk)


def test_scheme_round_trip(tmp_path):
    sk = default_basis_spec()
    assert expand_scheme(skeleton_to_scheme(sk)) == sk
    path = tmp_path / "basis.yaml"
    path.write_text("H: [[1s, 1, 2]]\nO: [[1s, 1, 1], [2s, 2, 3]]\n")
    loaded = load_basis_file(path)
    assert [s.q for s in loaded["O"]] == [1, 2, 2, 2]


def test_double_factorial():
    assert [double_factorial(n) for n in (-1, 0, 1, 3, 5, 7)] == [1, 1, 1, 3, 15, 105]


@pytest.mark.parametrize("q", [1, 2, 3, 4])
@pytest.mark.parametrize("zeta", [0.5, 1.0, 2.0, 3.7])
def test_normalizer_matches_quadrature(q, zeta):
    assert gto_normalizer(q, zeta) == pytest.approx(quad_z(q, zeta), rel=1e-10)
    # the half line carries exactly half the integrand's mass
    assert gto_normalizer(q, zeta) / quad_z(q, zeta, lower=0.0) == pytest.approx(math.sqrt(2),
                                                                                 rel=1e-10)


def test_normalizer_closed_values():
    assert gto_normalizer(1, 1.0) == pytest.approx((math.pi / 2) ** 0.25, rel=1e-14)
    assert gto_normalizer(2, 1.0) == pytest.approx((math.pi / 2) ** 0.25 / 2, rel=1e-14)
    assert gto_normalizer(1, 4.0) / gto_normalizer(1, 1.0) == pytest.approx(4 ** -0.25)


def test_gto_value():
    assert gto_value(1, 1.0, 0.0) == pytest.approx(1 / quad_z(1, 1.0), rel=1e-10)
    assert gto_value(2, 0.7, 0.0) == 0.0
    d = np.linspace(0, 8, 50)
    v = gto_value(1, 1.0, d)
    assert np.all(np.diff(v) < 0)
    assert v[-1] < 1e-25


def test_gto_matrix_single_point():
    h = Molecule("h", (Atom("H", (0, 0, 0)),))
    sk = expand_scheme({"H": [["1s", 1, 1]]})
    basis = BasisSet(sk, 3, np.random.default_rng(0))
    basis.log_zeta.data[:] = 0.0
    phi = gto_matrix(GridField(np.zeros((1, 3))), instantiate(h, basis), basis)
    assert phi.shape == (1, 1)
    assert phi.data[0, 0] == pytest.approx(1 / quad_z(1, 1.0), rel=1e-10)


def test_gto_matrix_shape_and_range():
    h = Molecule("h", (Atom("H", (0.1, 0.2, 0.3)),))
    basis = BasisSet(default_basis_spec(), 4, np.random.default_rng(0))
    inst = instantiate(h, basis)
    phi = gto_matrix(build_grid(h), inst, basis).data
    assert phi.shape == (81, 4)
    upper = 1 / gto_normalizer(inst.q, basis.zeta[inst.spec_index])
    assert np.all(phi > 0) and np.all(phi <= upper + 1e-15)


def test_gto_matrix_columns_follow_atom_permutation():
    mol = water()
    basis = BasisSet(default_basis_spec(), 4, np.random.default_rng(0))
    grid = build_grid(mol)
    order = [2, 0, 1]
    a = gto_matrix(grid, instantiate(mol, basis), basis).data
    inst_p = instantiate(mol.permuted(order), basis)
    b = gto_matrix(grid, inst_p, basis).data
    # entry (atom, spec) blocks move with the atoms
    for new_m, old_m in enumerate(order):
        cols_a = np.nonzero(instantiate(mol, basis).atom_index == old_m)[0]
        cols_b = np.nonzero(inst_p.atom_index == new_m)[0]
        np.testing.assert_array_equal(a[:, cols_a], b[:, cols_b])


def test_exponent_gradient_finite_difference():
    rng = np.random.default_rng(3)
    d = rng.uniform(0, 2, size=(7, 5))
    spec = np.array([0, 1, 1, 2, 0])
    q = np.array([1, 2, 2, 3, 1])
    log_zeta = Tensor(np.log([0.8, 1.3, 0.6]), requires_grad=True)
    w = rng.standard_normal((7, 5))

    def f():
        return float((gto_from_distances(d, spec, q, log_zeta).data * w).sum())

    out = gto_from_distances(d, spec, q, log_zeta)
    (g,) = out._backward(w)
    num = np.zeros(3)
    for k in range(3):
        orig = log_zeta.data[k]
        log_zeta.data[k] = orig + 1e-6
        up = f()
        log_zeta.data[k] = orig - 1e-6
        down = f()
        log_zeta.data[k] = orig
        num[k] = (up - down) / 2e-6
    np.testing.assert_allclose(g, num, rtol=1e-7)


def test_project_coefficients():
    c = np.array([[3.0], [4.0]])
    project_coefficients(c)
    np.testing.assert_allclose(c[:, 0], [0.6, 0.8])
    before = c.copy()
    project_coefficients(c)
    np.testing.assert_array_equal(c, before)
    with pytest.raises(ZeroDivisionError):
        project_coefficients(np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_projection_is_idempotent(rows, cols, seed):
    c = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    once = project_coefficients(c.copy())
    twice = project_coefficients(once.copy())
    np.testing.assert_allclose(twice, once, rtol=1e-15, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(once, axis=0), 1.0, rtol=1e-14)


def test_basis_set_init():
    basis = BasisSet(default_basis_spec(), 16, np.random.default_rng(0))
    assert basis.n_specs == 4 + 4 * 14
    assert basis.coefficients.shape == (60, 16)
    assert np.all((basis.zeta >= 0.5) & (basis.zeta <= 2.0))
    np.testing.assert_allclose(np.linalg.norm(basis.coefficients.data, axis=0), 1.0)
