"""Preprocessed dataset directories.

Layout written by :func:`preprocess`::

    manifest.tsv    id, n_atoms, n_electrons, grid_points, target_kcal_mol, split
    molecules.xyz   the kept records, re-serialized
    geometry.npz    grid points and external-potential targets, all molecules
    dataset.yaml    resolved settings (target kind, grid, split, source files)

Every text file starts with a ``# qdf <version> config=<hash>`` line.
"""

from __future__ import annotations

import csv
import io
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from qdf.basis import BasisSkeleton, default_basis_spec, instantiate, load_basis_file
from qdf.chem import (DatasetConfig, PropertyRecord, PropertySchema, compute_target,
                      count_electrons, filter_by_size, format_xyz_record, read_xyz_file,
                      split_dataset)
from qdf.grid import GridField, build_grid
from qdf.model import MoleculeInputs, external_potential, prepare_inputs
from qdf.trainer import file_header

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("id", "n_atoms", "n_electrons", "grid_points", "target_kcal_mol", "split")
SPLITS = ("train", "dev", "test")


class DatasetError(ValueError):
    pass


@dataclass
class PreparedDataset:
    root: Path
    settings: dict
    records: dict[str, PropertyRecord]
    targets: dict[str, float]
    split_of: dict[str, str]
    grids: dict[str, GridField]
    potentials: dict[str, np.ndarray]

    @property
    def target_kind(self) -> str:
        return self.settings["target_kind"]

    def ids(self, split: str | None = None) -> list[str]:
        return [i for i, s in self.split_of.items() if split is None or s == split]

    def inputs(self, split: str | None = None,
               skeleton: BasisSkeleton | None = None) -> list[MoleculeInputs]:
        skeleton = skeleton or default_basis_spec()
        out = []
        for mid in self.ids(split):
            mol = self.records[mid].molecule
            mi = prepare_inputs(mol, self.grids[mid], instantiate(mol, skeleton),
                                self.targets[mid])
            mi.potential = self.potentials[mid]
            out.append(mi)
        return out


def resolve_basis(cfg: Mapping) -> BasisSkeleton:
    path = cfg.get("basis_file")
    return load_basis_file(path) if path else default_basis_spec()


def preprocess(raw_paths: Sequence, out_dir, cfg: Mapping, dcfg: DatasetConfig) -> PreparedDataset:
    """Parse, filter, compute targets, build grids and write ``out_dir``.

    On any failure the partially written directory is removed.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise DatasetError(f"output directory {out_dir} is not empty")
    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return _preprocess(raw_paths, out_dir, cfg, dcfg)
    except BaseException:
        if created:
            shutil.rmtree(out_dir, ignore_errors=True)
        else:
            for child in out_dir.iterdir():
                if child.is_dir():
                    shutil.rmtree(child, ignore_errors=True)
                else:
                    child.unlink()
        raise


def _preprocess(raw_paths, out_dir: Path, cfg: Mapping, dcfg: DatasetConfig) -> PreparedDataset:
    records: list[PropertyRecord] = []
    for path in raw_paths:
        records += read_xyz_file(path, dcfg.schema)
    seen = set()
    for r in records:
        if r.id in seen:
            raise DatasetError(f"duplicate record id {r.id}")
        seen.add(r.id)
    n_raw = len(records)
    records = filter_by_size(records, int(cfg["max_atoms"]), int(cfg["min_atoms"]))
    log.info("kept %d of %d records (%s <= M <= %s)", len(records), n_raw,
             cfg["min_atoms"], cfg["max_atoms"])
    skeleton = resolve_basis(cfg)
    for r in records:
        instantiate(r.molecule, skeleton)  # fail early on elements without orbitals
    targets = {r.id: compute_target(r, dcfg.target_kind, dcfg.atom_refs, dcfg.target_properties)
               for r in records}
    split = split_dataset(records, dcfg.split_ratio, dcfg.seed)
    split_of = {}
    for name in SPLITS:
        for r in getattr(split, name):
            split_of[r.id] = name
    s, g = float(cfg["sphere_radius"]), float(cfg["grid_interval"])
    grids = {r.id: build_grid(r.molecule, s, g) for r in records}
    potentials = {r.id: external_potential(r.molecule, grids[r.id]) for r in records}

    header = file_header(dict(cfg))
    settings = {
        "target_kind": dcfg.target_kind,
        "sphere_radius": s,
        "grid_interval": g,
        "min_atoms": int(cfg["min_atoms"]),
        "max_atoms": int(cfg["max_atoms"]),
        "split_ratio": list(dcfg.split_ratio),
        "seed": dcfg.seed,
        "sources": [str(p) for p in raw_paths],
        "property_columns": {int(k): v for k, v in dcfg.schema.columns.items()},
        "id_column": dcfg.schema.id_column,
    }
    (out_dir / "dataset.yaml").write_text(header + "\n" + yaml.safe_dump(settings, sort_keys=True),
                                          encoding="utf-8")
    with open(out_dir / "molecules.xyz", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(format_xyz_record(r, dcfg.schema))
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in records:
        w.writerow([r.id, r.molecule.n_atoms, count_electrons(r.molecule), grids[r.id].count,
                    repr(targets[r.id]), split_of[r.id]])
    (out_dir / "manifest.tsv").write_text(header + "\n" + buf.getvalue(), encoding="utf-8")
    _write_geometry(out_dir / "geometry.npz", [r.id for r in records], grids, potentials)
    return PreparedDataset(out_dir, settings, {r.id: r for r in records}, targets, split_of,
                           grids, potentials)


def _write_geometry(path: Path, ids: list[str], grids, potentials) -> None:
    sizes = [grids[i].count for i in ids]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    points = np.concatenate([grids[i].points for i in ids]) if ids else np.zeros((0, 3))
    pot = np.concatenate([potentials[i] for i in ids]) if ids else np.zeros(0)
    np.savez(path, ids=np.array(ids, dtype=str), offsets=offsets, points=points.astype("<f8"),
             potential=pot.astype("<f8"))


def read_tsv(path: Path) -> list[dict[str, str]]:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


def load_prepared(root) -> PreparedDataset:
    root = Path(root)
    try:
        text = (root / "dataset.yaml").read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"{root} is not a preprocessed dataset: {exc}") from None
    settings = yaml.safe_load(text)
    columns = {int(k): v for k, v in settings["property_columns"].items()}
    schema = PropertySchema(columns, id_column=int(settings["id_column"]))
    records = {r.id: r for r in read_xyz_file(root / "molecules.xyz", schema)}
    rows = read_tsv(root / "manifest.tsv")
    targets = {row["id"]: float(row["target_kcal_mol"]) for row in rows}
    split_of = {row["id"]: row["split"] for row in rows}
    if set(targets) != set(records):
        raise DatasetError(f"{root}: manifest and molecules.xyz disagree")
    with np.load(root / "geometry.npz") as npz:
        ids = [str(i) for i in npz["ids"]]
        offsets, points, pot = npz["offsets"], npz["points"], npz["potential"]
    grids, potentials = {}, {}
    for k, mid in enumerate(ids):
        a, b = offsets[k], offsets[k + 1]
        grids[mid] = GridField(points[a:b])
        potentials[mid] = pot[a:b]
    return PreparedDataset(root, settings, records, targets, split_of, grids, potentials)

