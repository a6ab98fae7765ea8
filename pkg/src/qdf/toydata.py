"""Synthetic QM9-format molecules for offline testing.

Generates saturated, singly-bonded H/C/N/O/F molecules with plausible
bond lengths and writes them as QM9 extended-XYZ records.  Energies come
from a Morse bond-additive model plus a weak non-bonded term, so targets are
smooth functions of geometry and scale with molecule size.  The numbers are
not quantum-chemical reference data.

    python -m qdf.toydata --count 1000 --out toy.xyz --seed 0
"""

from __future__ import annotations

import argparse
import math
from pathlib import Path

import numpy as np

from qdf.chem import HARTREE_TO_KCAL_MOL

# QM9 B3LYP/6-31G(2df,p) isolated-atom U0 values, Hartree
QM9_ATOM_REFS_U0 = {"H": -0.500273, "C": -37.846772, "N": -54.583861,
                    "O": -75.064579, "F": -99.718730}

VALENCE = {"C": 4, "N": 3, "O": 2, "F": 1}
HEAVY_WEIGHTS = {"C": 0.68, "N": 0.13, "O": 0.15, "F": 0.04}

# equilibrium length (Å), well depth (kcal/mol)
BONDS = {
    ("C", "H"): (1.09, 99.0), ("N", "H"): (1.01, 93.0), ("O", "H"): (0.96, 111.0),
    ("F", "H"): (0.92, 135.0),
    ("C", "C"): (1.53, 83.0), ("C", "N"): (1.47, 73.0), ("C", "O"): (1.43, 86.0),
    ("C", "F"): (1.35, 116.0), ("N", "N"): (1.45, 39.0), ("N", "O"): (1.40, 53.0),
    ("N", "F"): (1.36, 65.0), ("O", "O"): (1.48, 34.0), ("O", "F"): (1.42, 45.0),
    ("F", "F"): (1.42, 37.0),
}
MORSE_WIDTH = 1.8  # 1/Å


def _bond(a: str, b: str) -> tuple[float, float]:
    return BONDS.get((a, b)) or BONDS[(b, a)]


def _place(parent: int, elements: list[str], pos: list[np.ndarray], neighbors: list[list[int]],
           new_el: str, rng: np.random.Generator, tries: int = 96) -> np.ndarray:
    r0, _ = _bond(elements[parent], new_el)
    length = r0 + rng.normal(0.0, 0.02)
    origin = pos[parent]
    existing = [pos[j] - origin for j in neighbors[parent]]
    best, best_score = None, -math.inf
    for _ in range(tries):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        cand = origin + length * d
        angle = min((math.acos(np.clip(d @ (e / np.linalg.norm(e)), -1, 1)) for e in existing),
                    default=math.pi)
        clear = min((np.linalg.norm(cand - p) for k, p in enumerate(pos) if k != parent),
                    default=10.0)
        score = min(angle / math.radians(109.5), 1.0) + min(clear / 1.6, 1.0)
        if score > best_score:
            best, best_score = cand, score
    return best


def make_molecule(n_heavy: int, rng: np.random.Generator) -> tuple[list[str], np.ndarray,
                                                                    list[tuple[int, int]]]:
    heavy_names = list(HEAVY_WEIGHTS)
    probs = np.array([HEAVY_WEIGHTS[e] for e in heavy_names])
    elements: list[str] = []
    free: list[int] = []
    pos: list[np.ndarray] = []
    neighbors: list[list[int]] = []
    bonds: list[tuple[int, int]] = []

    first = "C" if n_heavy > 1 else str(rng.choice(heavy_names, p=probs))
    elements.append(first)
    free.append(VALENCE[first])
    pos.append(np.zeros(3))
    neighbors.append([])
    for _ in range(n_heavy - 1):
        open_sites = [i for i, f in enumerate(free) if f > 0]
        parent = int(rng.choice(open_sites))
        # a terminal atom (F, or O with one bond) must not close the last open site
        el = str(rng.choice(heavy_names, p=probs))
        if len(open_sites) == 1 and free[parent] == 1 and VALENCE[el] == 1:
            el = "C"
        p = _place(parent, elements, pos, neighbors, el, rng)
        k = len(elements)
        elements.append(el)
        pos.append(p)
        neighbors.append([parent])
        neighbors[parent].append(k)
        free.append(VALENCE[el] - 1)
        free[parent] -= 1
        bonds.append((parent, k))
    for i in range(n_heavy):
        while free[i] > 0:
            p = _place(i, elements, pos, neighbors, "H", rng)
            k = len(elements)
            elements.append("H")
            pos.append(p)
            neighbors.append([i])
            neighbors[i].append(k)
            free.append(0)
            free[i] -= 1
            bonds.append((i, k))
    return elements, np.array(pos), bonds


def toy_energies(elements: list[str], pos: np.ndarray,
                 bonds: list[tuple[int, int]]) -> dict[str, float]:
    """Raw properties in Hartree: U0, zpve, H."""
    e_at = 0.0
    zpve = 0.0
    bonded = set()
    for i, j in bonds:
        r0, depth = _bond(elements[i], elements[j])
        r = float(np.linalg.norm(pos[i] - pos[j]))
        x = math.exp(-MORSE_WIDTH * (r - r0))
        e_at += depth * (x * x - 2.0 * x)
        has_h = "H" in (elements[i], elements[j])
        zpve += (4.6 if has_h else 1.6) * (r0 / r) ** 2  # kcal/mol
        bonded.add((min(i, j), max(i, j)))
    charges = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}
    n = len(elements)
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) in bonded:
                continue
            r = float(np.linalg.norm(pos[i] - pos[j]))
            e_at += 0.05 * math.sqrt(charges[elements[i]] * charges[elements[j]]) * math.exp(-r)
    u0 = sum(QM9_ATOM_REFS_U0[e] for e in elements) + e_at / HARTREE_TO_KCAL_MOL
    zpve_h = zpve / HARTREE_TO_KCAL_MOL
    enthalpy = u0 + 0.0009441 * (1.0 + 0.25 * n) / 2.0
    return {"U0": u0, "zpve": zpve_h, "H": enthalpy}


def format_record(index: int, elements: list[str], pos: np.ndarray,
                  props: dict[str, float]) -> str:
    cols = ["gdb", str(index)] + ["0.0"] * 15
    cols[11] = f"{props['zpve']:.8f}"
    cols[12] = f"{props['U0']:.8f}"
    cols[13] = f"{props['U0'] + 0.0003:.8f}"
    cols[14] = f"{props['H']:.8f}"
    cols[15] = f"{props['H'] - 0.03:.8f}"
    lines = [str(len(elements)), "\t".join(cols)]
    for el, p in zip(elements, pos):
        lines.append(f"{el}\t{p[0]:.10f}\t{p[1]:.10f}\t{p[2]:.10f}\t0.0")
    lines.append("\t".join(["100.0"] * max(1, 3 * len(elements) - 6)))
    lines.append("TOY\tTOY")
    lines.append("InChI=TOY\tInChI=TOY")
    return "\n".join(lines) + "\n"


def generate(count: int, seed: int = 0, min_heavy: int = 1, max_heavy: int = 9,
             start_index: int = 1) -> str:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        n_heavy = int(rng.integers(min_heavy, max_heavy + 1))
        elements, pos, bonds = make_molecule(n_heavy, rng)
        out.append(format_record(start_index + k, elements, pos,
                                 toy_energies(elements, pos, bonds)))
    return "".join(out)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-heavy", type=int, default=1)
    ap.add_argument("--max-heavy", type=int, default=9)
    ap.add_argument("--start-index", type=int, default=1)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)
    args.out.write_text(generate(args.count, args.seed, args.min_heavy, args.max_heavy,
                                 args.start_index), encoding="utf-8")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
