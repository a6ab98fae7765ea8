"""QM9-style extended-XYZ ingestion, learning targets and dataset splits.

A record looks like::

    3
    gdb 42 ... 17 whitespace-separated properties ...
    O   0.000000   0.000000   0.000000   -0.41
    H   0.000000   0.757000   0.586000    0.20
    H   0.000000  -0.757000   0.586000    0.20
    <optional trailing lines: frequencies, SMILES, InChI>

Which property-line column holds which quantity is not fixed here; it is
supplied by a :class:`PropertySchema` (the shipped default matches QM9).
Raw energies are Hartree; every target leaves this module in kcal/mol.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

HARTREE_TO_KCAL_MOL = 627.509474

# Supported elements and their nuclear charges. Extending to other elements
# means adding them here and giving them orbital specs in the basis file.
ELEMENT_CHARGES: dict[str, int] = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}

TARGET_KINDS = ("atomization_energy_0K", "zpve", "enthalpy_298K")

# Property read for each target kind (names refer to PropertySchema columns).
DEFAULT_TARGET_PROPERTIES: dict[str, str] = {
    "atomization_energy_0K": "U0",
    "zpve": "zpve",
    "enthalpy_298K": "H",
}


class ParseError(ValueError):
    """Base class for malformed records; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        self.detail = message
        super().__init__(self._render())

    def _render(self) -> str:
        where = ""
        if self.source is not None:
            where = f"{self.source}:{self.line}: " if self.line is not None else f"{self.source}: "
        elif self.line is not None:
            where = f"line {self.line}: "
        return where + self.detail

    def located(self, source: str, line_offset: int = 0) -> ParseError:
        """Return a copy positioned inside a larger file."""
        line = None if self.line is None else self.line + line_offset
        return type(self)(self.detail, line=line, source=source)


class AtomCountError(ParseError):
    """Declared atom count disagrees with the atom lines present."""


class UnknownElementError(ParseError):
    """Element symbol outside the supported set."""


class CoordinateError(ParseError):
    """A coordinate token is not a finite number."""


class MissingPropertyError(ParseError):
    """The property line lacks a column required by the schema."""


class ChargeStateError(ParseError):
    """Record is not a neutral closed-shell molecule."""


class MissingReferenceError(KeyError):
    """No atomic reference energy for an element."""


class InsufficientRecordsError(ValueError):
    """Too few records for the requested split."""


@dataclass(frozen=True)
class Atom:
    element: str
    position: tuple[float, float, float]

    @property
    def charge(self) -> int:
        return ELEMENT_CHARGES[self.element]


@dataclass(frozen=True)
class Molecule:
    id: str
    atoms: tuple[Atom, ...]

    def __post_init__(self):
        if not self.atoms:
            raise ValueError(f"molecule {self.id!r} has no atoms")
        pos = self.positions
        if len({tuple(p) for p in pos.tolist()}) != len(self.atoms):
            raise ValueError(f"molecule {self.id!r} has two atoms at the same position")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms], dtype=float).reshape(-1, 3)

    @property
    def charges(self) -> np.ndarray:
        return np.array([a.charge for a in self.atoms], dtype=float)

    def translated(self, shift: Sequence[float]) -> Molecule:
        shift = np.asarray(shift, dtype=float)
        atoms = tuple(Atom(a.element, tuple((np.asarray(a.position) + shift).tolist()))
                      for a in self.atoms)
        return Molecule(self.id, atoms)

    def permuted(self, order: Sequence[int]) -> Molecule:
        return Molecule(self.id, tuple(self.atoms[i] for i in order))


@dataclass(frozen=True)
class PropertyRecord:
    molecule: Molecule
    raw_properties: Mapping[str, float]
    tag: str = "gdb"
    # verbatim property-line tokens, kept so records re-serialize losslessly
    property_tokens: tuple[str, ...] = ()

    @property
    def id(self) -> str:
        return self.molecule.id


@dataclass(frozen=True)
class PropertySchema:
    """Maps property-line column index to a property name.

    ``id_column`` is the column holding the record index; the record id is
    ``f"{tag}_{index}"`` where ``tag`` is column 0.
    """

    columns: Mapping[int, str]
    id_column: int = 1

    @classmethod
    def qm9(cls) -> PropertySchema:
        names = ["A", "B", "C", "mu", "alpha", "homo", "lumo", "gap", "r2",
                 "zpve", "U0", "U", "H", "G", "Cv"]
        return cls({i + 2: n for i, n in enumerate(names)}, id_column=1)


@dataclass
class DatasetSplit:
    train: list[PropertyRecord]
    dev: list[PropertyRecord]
    test: list[PropertyRecord]
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.dev), len(self.test)


_INT_RE = re.compile(r"^\s*\d+\s*$")


def _to_float(token: str) -> float:
    # QM9 writes some exponents Mathematica-style, e.g. 2.1997*^-6
    return float(token.replace("*^", "e"))


def _looks_like_atom_line(tokens: list[str]) -> bool:
    if len(tokens) < 4 or not tokens[0].isalpha():
        return False
    try:
        for t in tokens[1:4]:
            _to_float(t)
    except ValueError:
        return False
    return True


def parse_xyz_record(text: str, schema: PropertySchema | None = None) -> PropertyRecord:
    """Parse a single extended-XYZ record.

    Raises:
        AtomCountError, UnknownElementError, CoordinateError,
        MissingPropertyError, ChargeStateError: each with the offending line.
    """
    schema = schema or PropertySchema.qm9()
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or not _INT_RE.match(lines[0]):
        raise AtomCountError("first line must be the atom count", line=1)
    n_atoms = int(lines[0])
    if n_atoms < 1:
        raise AtomCountError("atom count must be positive", line=1)
    if len(lines) < 2:
        raise MissingPropertyError("missing property line", line=2)

    tokens = lines[1].split()
    needed = max([schema.id_column, *schema.columns.keys()])
    if len(tokens) <= needed:
        raise MissingPropertyError(
            f"property line has {len(tokens)} columns, schema needs column {needed}", line=2)
    raw: dict[str, float] = {}
    for col, name in schema.columns.items():
        try:
            raw[name] = _to_float(tokens[col])
        except ValueError:
            raise MissingPropertyError(
                f"column {col} ({name}) is not numeric: {tokens[col]!r}", line=2) from None
    record_id = f"{tokens[0]}_{tokens[schema.id_column]}"

    atoms = []
    for k in range(n_atoms):
        lineno = k + 3
        if k + 2 >= len(lines):
            raise AtomCountError(f"declared {n_atoms} atoms but found {k}", line=lineno)
        parts = lines[k + 2].split()
        if len(parts) < 4:
            raise AtomCountError(f"declared {n_atoms} atoms but found {k}", line=lineno)
        symbol = parts[0]
        if symbol not in ELEMENT_CHARGES:
            raise UnknownElementError(f"unknown element {symbol!r}", line=lineno)
        try:
            xyz = tuple(_to_float(t) for t in parts[1:4])
        except ValueError:
            raise CoordinateError(f"non-numeric coordinate in {lines[k + 2].strip()!r}",
                                  line=lineno) from None
        if not all(math.isfinite(c) for c in xyz):
            raise CoordinateError("non-finite coordinate", line=lineno)
        atoms.append(Atom(symbol, xyz))
    extra = n_atoms + 2
    if extra < len(lines) and _looks_like_atom_line(lines[extra].split()):
        raise AtomCountError(f"declared {n_atoms} atoms but more atom lines follow",
                             line=extra + 1)

    try:
        molecule = Molecule(record_id, tuple(atoms))
    except ValueError as exc:
        raise CoordinateError(str(exc), line=3) from None
    n_elec = sum(a.charge for a in atoms)
    if n_elec % 2:
        raise ChargeStateError(f"odd electron count {n_elec}: not a neutral closed-shell molecule",
                               line=1)
    return PropertyRecord(molecule, raw, tag=tokens[0], property_tokens=tuple(tokens))


def split_records(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    """Yield ``(first_line_number, record_text)`` for each record in a stream.

    A new record starts at a line holding a single integer; trailing lines
    after the atom block stay attached to the preceding record.
    """
    start = None
    buf: list[str] = []
    for lineno, line in enumerate(lines, start=1):
        if _INT_RE.match(line) and (not buf or _record_complete(buf)):
            if buf:
                yield start, "".join(buf)
            buf, start = [], lineno
        if start is None:
            if not line.strip():
                continue
            start = lineno
        buf.append(line if line.endswith("\n") else line + "\n")
    if buf:
        yield start, "".join(buf)


def _record_complete(buf: list[str]) -> bool:
    if not _INT_RE.match(buf[0]):
        return True
    return len(buf) >= int(buf[0]) + 2


def iter_xyz_file(path, schema: PropertySchema | None = None
                  ) -> Iterator[PropertyRecord | ParseError]:
    """Stream records from a file, yielding located ParseErrors inline."""
    with open(path, encoding="utf-8") as fh:
        for start, text in split_records(fh):
            try:
                yield parse_xyz_record(text, schema)
            except ParseError as err:
                yield err.located(str(path), start - 1)


def read_xyz_file(path, schema: PropertySchema | None = None) -> list[PropertyRecord]:
    """Parse every record of a file; the first malformed record raises."""
    out = []
    for item in iter_xyz_file(path, schema):
        if isinstance(item, ParseError):
            raise item
        out.append(item)
    return out


def format_xyz_record(record: PropertyRecord, schema: PropertySchema | None = None) -> str:
    """Serialize a record so that :func:`parse_xyz_record` reproduces it."""
    schema = schema or PropertySchema.qm9()
    if record.property_tokens:
        tokens = list(record.property_tokens)
    else:
        width = max([schema.id_column, *schema.columns.keys()]) + 1
        tokens = ["0"] * width
        tokens[0] = record.tag
        tokens[schema.id_column] = record.id.rsplit("_", 1)[-1]
        for col, name in schema.columns.items():
            tokens[col] = repr(float(record.raw_properties[name]))
    lines = [str(record.molecule.n_atoms), "\t".join(tokens)]
    for atom in record.molecule.atoms:
        x, y, z = (repr(float(c)) for c in atom.position)
        lines.append(f"{atom.element}\t{x}\t{y}\t{z}")
    return "\n".join(lines) + "\n"


def compute_target(record: PropertyRecord, kind: str,
                   atom_refs: Mapping[str, float] | None = None,
                   target_properties: Mapping[str, str] | None = None) -> float:
    """Learning target in kcal/mol.

    Atomization energy is ``U0 - sum(ref[element])``; zpve and enthalpy are
    the raw property.  Both are converted from Hartree.
    """
    if kind not in TARGET_KINDS:
        raise ValueError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
    prop = (target_properties or DEFAULT_TARGET_PROPERTIES)[kind]
    if prop not in record.raw_properties:
        raise MissingPropertyError(f"record {record.id} lacks property {prop!r}")
    value = record.raw_properties[prop]
    if kind == "atomization_energy_0K":
        refs = atom_refs or {}
        for el in record.molecule.elements:
            if el not in refs:
                raise MissingReferenceError(f"no reference energy for element {el!r}")
        value = value - sum(refs[el] for el in record.molecule.elements)
    return value * HARTREE_TO_KCAL_MOL


def filter_by_size(records: Iterable[PropertyRecord], max_atoms: int,
                   min_atoms: int = 1) -> list[PropertyRecord]:
    if min_atoms > max_atoms:
        raise ValueError("min_atoms must not exceed max_atoms")
    return [r for r in records if min_atoms <= r.molecule.n_atoms <= max_atoms]


def split_sizes(n: int, ratio: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``ratio`` parts."""
    total = float(sum(ratio))
    quotas = [n * r / total for r in ratio]
    sizes = [int(math.floor(q)) for q in quotas]
    remainders = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(records: Sequence[PropertyRecord], ratio: Sequence[float] = (8, 1, 1),
                  seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then a train/dev/test partition proportional to ``ratio``."""
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError("ratio must have three positive parts")
    if len(records) < len(ratio):
        raise InsufficientRecordsError(
            f"{len(records)} records cannot be split into {len(ratio)} parts")
    order = np.random.default_rng(seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    n_train, n_dev, _ = split_sizes(len(records), ratio)
    return DatasetSplit(
        train=shuffled[:n_train],
        dev=shuffled[n_train:n_train + n_dev],
        test=shuffled[n_train + n_dev:],
        seed=seed,
    )


def count_electrons(molecule: Molecule) -> int:
    """Total electrons of a neutral molecule: the sum of nuclear charges."""
    return int(sum(a.charge for a in molecule.atoms))


@dataclass
class DatasetConfig:
    """Ingestion settings; loaded from the ``dataset`` section of a config file."""

    schema: PropertySchema = field(default_factory=PropertySchema.qm9)
    target_kind: str = "atomization_energy_0K"
    target_properties: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_TARGET_PROPERTIES))
    atom_refs: dict[str, float] = field(default_factory=dict)
    split_ratio: tuple[float, float, float] = (8, 1, 1)
    seed: int = 0
