import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdf.chem import Atom, Molecule
from qdf.grid import ball_offsets, build_grid, write_grid

from conftest import toy_records, water


def brute_force_count(s, g):
    """Lattice points k*g (k integer) inside a closed ball of radius s, by enumeration."""
    n = int(s / g) + 2
    count = 0
    for i, j, k in itertools.product(range(-n, n + 1), repeat=3):
        if (i * i + j * j + k * k) * g * g <= s * s + 1e-12:
            count += 1
    return count


def single(el="H", at=(0.0, 0.0, 0.0)):
    return Molecule("single", (Atom(el, at),))


def test_single_atom_81_points():
    assert brute_force_count(0.75, 0.3) == 81
    assert build_grid(single(), 0.75, 0.3).count == 81


def test_two_distant_atoms_162_points():
    mol = Molecule("pair", (Atom("H", (0, 0, 0)), Atom("H", (10.0, 0, 0))))
    assert build_grid(mol, 0.75, 0.3).count == 162


def test_coarse_grid_keeps_anchor():
    grid = build_grid(single(at=(0.3, -1.2, 2.0)), 0.75, 2.0)
    assert grid.count == 1
    np.testing.assert_allclose(grid.points[0], [0.3, -1.2, 2.0])


@pytest.mark.parametrize("s,g", [(0.75, 0.3), (1.0, 0.25), (0.6, 0.2), (0.5, 0.5), (1.3, 0.4)])
def test_offsets_match_enumeration(s, g):
    assert len(ball_offsets(s, g)) == brute_force_count(s, g)


def test_points_within_radius_of_some_atom():
    mol = water()
    grid = build_grid(mol, 0.75, 0.3)
    d = np.linalg.norm(grid.points[:, None, :] - mol.positions[None], axis=-1)
    assert np.all(d.min(axis=1) <= 0.75 + 1e-12)
    assert len(np.unique(np.round(grid.points, 8), axis=0)) == grid.count


def test_overlapping_balls_are_deduplicated():
    # atoms one lattice step apart share most of their lattice points
    mol = Molecule("pair", (Atom("H", (0, 0, 0)), Atom("H", (0.3, 0, 0))))
    pts = build_grid(mol, 0.75, 0.3).points
    assert len(pts) < 162
    lattice = {tuple(k) for k in ball_offsets(0.75, 0.3).tolist()}
    union = lattice | {(a + 1, b, c) for a, b, c in lattice}
    assert len(pts) == len(union)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_grid(single(), 0.0, 0.3)
    with pytest.raises(ValueError):
        build_grid(single(), 0.75, -1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), perm_seed=st.integers(0, 1000))
def test_grid_independent_of_atom_order(seed, perm_seed):
    mol = toy_records(1, seed=seed, max_heavy=4)[0].molecule
    order = np.random.default_rng(perm_seed).permutation(mol.n_atoms)
    a = build_grid(mol).points
    b = build_grid(mol.permuted(order)).points
    np.testing.assert_array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(shift=st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3))
def test_translation_moves_grid(shift):
    mol = water()
    a = build_grid(mol).points
    b = build_grid(mol.translated(shift)).points
    assert a.shape == b.shape
    np.testing.assert_allclose(np.sort(b - np.asarray(shift), axis=0), np.sort(a, axis=0),
                               atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(s1=st.floats(0.3, 1.2), ds=st.floats(0.0, 0.5))
def test_count_monotone_in_radius(s1, ds):
    assert build_grid(single(), s1, 0.25).count <= build_grid(single(), s1 + ds, 0.25).count


def test_write_grid(tmp_path):
    grid = build_grid(single(), 0.75, 0.3)
    path = tmp_path / "grid.tsv"
    write_grid(grid, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x\ty\tz"
    back = np.loadtxt(path, skiprows=1, delimiter="\t")
    np.testing.assert_allclose(back, grid.points, atol=1e-10)
