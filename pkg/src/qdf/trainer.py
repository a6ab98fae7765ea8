"""Alternating optimization of the energy and potential objectives."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from qdf import __version__
from qdf import tensor as T
from qdf.basis import expand_scheme, project_coefficients, skeleton_to_scheme
from qdf.model import (ModelConfig, MoleculeInputs, QDFModel, loss_E, orbitals,
                       potential_loss, predict_energy)
from qdf.nn import Adam, AdamState, lr_schedule

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qdf-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    """A loss became non-finite."""


class LeakageError(ValueError):
    """Evaluation data overlaps the training data."""


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 5e-4
    lr_decay: float = 0.5
    decay_step: int = 200
    epochs: int = 2000
    n_orbitals: int = 200
    hk_width: int = 200
    energy_layers: int = 3
    hk_layers: int = 3
    sphere_radius: float = 0.75
    grid_interval: float = 0.3
    seed: int = 0
    alternation: str = "batch"   # or "epoch"
    order: str = "EV"            # E-step first, or "VE"
    normalize: str = "differentiable"

    def __post_init__(self):
        for f in ("batch_size", "epochs", "decay_step", "n_orbitals", "hk_width",
                  "energy_layers", "hk_layers"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        for f in ("base_lr", "lr_decay", "sphere_radius", "grid_interval"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.alternation not in ("batch", "epoch"):
            raise ValueError("alternation must be 'batch' or 'epoch'")
        if self.order not in ("EV", "VE"):
            raise ValueError("order must be 'EV' or 'VE'")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n_orbitals, self.hk_width, self.energy_layers, self.hk_layers,
                           self.normalize)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def file_header(config: dict) -> str:
    return f"# qdf {__version__} config={config_hash(config)}"


@dataclass
class Batch:
    molecules: list[MoleculeInputs]

    @property
    def ids(self) -> list[str]:
        return [m.id for m in self.molecules]

    @property
    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.molecules)), [m.grid_size for m in self.molecules])

    @property
    def targets(self) -> np.ndarray:
        return np.array([m.target for m in self.molecules])

    @property
    def potentials(self) -> np.ndarray:
        return np.concatenate([m.potential for m in self.molecules])

    @property
    def n_electrons(self) -> np.ndarray:
        return np.array([m.n_electrons for m in self.molecules])

    def __len__(self) -> int:
        return len(self.molecules)


def make_batches(samples: Sequence[MoleculeInputs], batch_size: int, seed: int,
                 epoch: int, shuffle: bool = True) -> list[Batch]:
    """Batches of ``batch_size`` molecules, order fixed by ``(seed, epoch)``."""
    if not samples:
        raise ValueError("cannot batch an empty split")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    return [Batch([samples[i] for i in order[k:k + batch_size]])
            for k in range(0, len(samples), batch_size)]


@dataclass
class TrainState:
    model: QDFModel
    opt_energy: Adam
    opt_potential: Adam
    epoch: int = 0  # completed epochs
    best_dev_mae: float = math.inf

    @classmethod
    def create(cls, config: TrainConfig, skeleton=None) -> TrainState:
        model = QDFModel(config.model_config(), skeleton, seed=config.seed)
        return cls(model, Adam(model.energy_parameters()), Adam(model.potential_parameters()))


@dataclass
class StepResult:
    loss_E: float
    loss_V: float
    # sum_i rho(r_i) per molecule, seen by the E and V forward passes
    electrons_E: np.ndarray
    electrons_V: np.ndarray
    # column norms of the coefficient table after each optimizer step
    coeff_norms: list[np.ndarray] = field(default_factory=list)


def _check_finite(loss: T.Tensor, pred: np.ndarray | None, batch: Batch, what: str) -> None:
    if np.isfinite(loss.data).all():
        return
    bad = batch.ids
    if pred is not None and pred.shape[0] == len(batch):
        flagged = [mid for mid, p in zip(batch.ids, pred) if not np.isfinite(p)]
        bad = flagged or bad
    raise NumericalAbort(f"non-finite {what} loss; molecule(s): {', '.join(bad)}")


def _energy_substep(state: TrainState, batch: Batch, lr: float) -> tuple[float, np.ndarray]:
    model = state.model
    state.opt_energy.zero_grad()
    fwd = orbitals(model, batch.molecules)
    pred = predict_energy(model, fwd)
    loss = loss_E(pred, batch.targets)
    _check_finite(loss, pred.data, batch, "energy")
    loss.backward()
    state.opt_energy.step(lr)
    project_coefficients(model.basis.coefficients.data)
    return loss.item(), fwd.electron_counts()


def _potential_substep(state: TrainState, batch: Batch, lr: float) -> tuple[float, np.ndarray]:
    model = state.model
    state.opt_potential.zero_grad()
    loss, fwd = potential_loss(model, batch.molecules)
    _check_finite(loss, None, batch, "potential")
    loss.backward()
    state.opt_potential.step(lr)
    project_coefficients(model.basis.coefficients.data)
    return loss.item(), fwd.electron_counts()


def train_step(batch: Batch, state: TrainState, lr: float, order: str = "EV") -> StepResult:
    """One E sub-step and one V sub-step on the same batch, in ``order``."""
    out = {}
    norms = []
    for which in order:
        if which == "E":
            out["E"] = _energy_substep(state, batch, lr)
        else:
            out["V"] = _potential_substep(state, batch, lr)
        norms.append(np.linalg.norm(state.model.basis.coefficients.data, axis=0))
    return StepResult(out["E"][0], out["V"][0], out["E"][1], out["V"][1], norms)


def predict(samples: Sequence[MoleculeInputs], model: QDFModel,
            batch_size: int = 16) -> np.ndarray:
    """E' for every sample, in input order; no gradients, no mutation."""
    preds = []
    with T.no_grad():
        for k in range(0, len(samples), batch_size):
            chunk = list(samples[k:k + batch_size])
            preds.append(predict_energy(model, orbitals(model, chunk)).data)
    return np.concatenate(preds) if preds else np.zeros(0)


def evaluate(samples: Sequence[MoleculeInputs], model: QDFModel, batch_size: int = 16) -> float:
    """Mean absolute error in kcal/mol."""
    if not samples:
        return math.nan
    pred = predict(samples, model, batch_size)
    return float(np.mean(np.abs(pred - np.array([s.target for s in samples]))))


@dataclass
class ExtrapolationReport:
    rows: list[tuple[str, int, int, float]]  # (set, size M, count, MAE)
    interpolation_mae: float
    extrapolation_mae: float

    def to_tsv(self, header: str | None = None) -> str:
        lines = [header] if header else []
        lines.append("set\tn_atoms\tcount\tmae_kcal_mol")
        for name, m, count, mae in self.rows:
            lines.append(f"{name}\t{m}\t{count}\t{mae:.6f}")
        lines.append(f"interpolation\tall\t{self._count('interpolation')}\t"
                     f"{self.interpolation_mae:.6f}")
        lines.append(f"extrapolation\tall\t{self._count('extrapolation')}\t"
                     f"{self.extrapolation_mae:.6f}")
        return "\n".join(lines) + "\n"

    def _count(self, name: str) -> int:
        return sum(r[2] for r in self.rows if r[0] == name)


def run_extrapolation(model: QDFModel, small_test: Sequence[MoleculeInputs],
                      large_set: Sequence[MoleculeInputs], train_ids: Iterable[str],
                      batch_size: int = 16) -> ExtrapolationReport:
    """MAE bucketed by molecule size on held-out small and large molecules."""
    train_ids = set(train_ids)
    for name, data in (("interpolation", small_test), ("extrapolation", large_set)):
        leaked = sorted(train_ids & {s.id for s in data})
        if leaked:
            raise LeakageError(f"{len(leaked)} training molecule(s) in the {name} set, "
                               f"e.g. {leaked[:3]}")
    rows = []
    overall = {}
    for name, data in (("interpolation", small_test), ("extrapolation", large_set)):
        if not data:
            overall[name] = math.nan
            continue
        err = np.abs(predict(data, model, batch_size) - np.array([s.target for s in data]))
        sizes = np.array([s.n_atoms for s in data])
        for m in sorted(set(sizes.tolist())):
            sel = sizes == m
            rows.append((name, int(m), int(sel.sum()), float(err[sel].mean())))
        overall[name] = float(err.mean())
    return ExtrapolationReport(rows, overall["interpolation"], overall["extrapolation"])


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> None:
    """Write parameters, optimizer moments and counters to an ``.npz`` container.

    Arrays are stored as little-endian float64 in row-major order.
    """
    path = Path(path)
    model = state.model
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "qdf_version": __version__,
        "model_config": model.config.to_dict(),
        "basis_scheme": skeleton_to_scheme(model.basis.skeleton),
        "epoch": state.epoch,
        "best_dev_mae": state.best_dev_mae,
        "optimizers": {},
        "extra": extra or {},
    }
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters().items():
        arrays[f"param/{name}"] = p.data.astype("<f8")
    for key, opt in (("energy", state.opt_energy), ("potential", state.opt_potential)):
        st = opt.state
        meta["optimizers"][key] = {"step": st.step, "beta1": st.beta1, "beta2": st.beta2,
                                   "eps": st.eps}
        for name in st.m:
            arrays[f"adam/{key}/m/{name}"] = st.m[name].astype("<f8")
            arrays[f"adam/{key}/v/{name}"] = st.v[name].astype("<f8")
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[TrainState, dict]:
    """Inverse of :func:`save_checkpoint`; returns the state and the metadata."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from None
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or unreadable metadata ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a qdf checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    config = ModelConfig(**meta["model_config"])
    if expected is not None:
        for key in ("n_orbitals", "hk_width", "energy_layers", "hk_layers"):
            if getattr(expected, key) != getattr(config, key):
                raise CheckpointShapeError(
                    f"{path}: checkpoint has {key}={getattr(config, key)}, "
                    f"configuration asks for {getattr(expected, key)}")
    model = QDFModel(config, expand_scheme(meta["basis_scheme"]))
    params = model.named_parameters()
    for name, p in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: parameter {name} missing")
        if arrays[key].shape != p.data.shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {arrays[key].shape}, "
                                       f"model expects {p.data.shape}")
        p.data[...] = arrays[key]
    state = TrainState(model, Adam(model.energy_parameters()), Adam(model.potential_parameters()),
                       epoch=int(meta["epoch"]), best_dev_mae=float(meta["best_dev_mae"]))
    for key, opt in (("energy", state.opt_energy), ("potential", state.opt_potential)):
        info = meta["optimizers"][key]
        st = AdamState(beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"],
                       step=int(info["step"]))
        prefix = f"adam/{key}/m/"
        for k in arrays:
            if k.startswith(prefix):
                name = k[len(prefix):]
                st.m[name] = arrays[k].copy()
                st.v[name] = arrays[f"adam/{key}/v/{name}"].copy()
        opt.state = st
    return state, meta


# -- training loop -------------------------------------------------------------

METRICS_COLUMNS = ("epoch", "lr", "loss_E", "loss_V", "dev_mae", "seconds")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss_E: float
    loss_V: float
    dev_mae: float
    seconds: float

    def row(self) -> str:
        return (f"{self.epoch}\t{self.lr:.6g}\t{self.loss_E:.10g}\t{self.loss_V:.10g}\t"
                f"{self.dev_mae:.10g}\t{self.seconds:.3f}")


def train_epoch(state: TrainState, train: Sequence[MoleculeInputs], config: TrainConfig,
                epoch: int, on_step: Callable[[StepResult], None] | None = None
                ) -> tuple[float, float, float]:
    """Run one epoch; returns (lr, mean L_E, mean L_V) over the epoch's batches."""
    lr = lr_schedule(epoch, config.base_lr, config.lr_decay, config.decay_step)
    batches = make_batches(train, config.batch_size, config.seed, epoch)
    losses_E, losses_V = [], []
    if config.alternation == "batch":
        for batch in batches:
            res = train_step(batch, state, lr, config.order)
            losses_E.append(res.loss_E)
            losses_V.append(res.loss_V)
            if on_step:
                on_step(res)
    else:
        for which in config.order:
            for batch in batches:
                if which == "E":
                    value, elec = _energy_substep(state, batch, lr)
                    losses_E.append(value)
                else:
                    value, elec = _potential_substep(state, batch, lr)
                    losses_V.append(value)
                if on_step:
                    norms = [np.linalg.norm(state.model.basis.coefficients.data, axis=0)]
                    res = StepResult(value if which == "E" else math.nan,
                                     value if which == "V" else math.nan,
                                     elec if which == "E" else np.zeros(0),
                                     elec if which == "V" else np.zeros(0), norms)
                    on_step(res)
    return lr, float(np.mean(losses_E)), float(np.mean(losses_V))


def fit(state: TrainState, train: Sequence[MoleculeInputs], dev: Sequence[MoleculeInputs],
        config: TrainConfig, out_dir=None, run_config: dict | None = None,
        on_epoch: Callable[[EpochMetrics], None] | None = None,
        on_step: Callable[[StepResult], None] | None = None) -> list[EpochMetrics]:
    """Train from ``state.epoch`` up to ``config.epochs``.

    With ``out_dir`` set, appends to ``metrics.tsv`` and writes ``final.npz``
    and ``best.npz`` (lowest dev MAE) there.
    """
    train_ids = {s.id for s in train}
    dev_ids = {s.id for s in dev}
    if train_ids & dev_ids:
        raise LeakageError(f"dev set shares {len(train_ids & dev_ids)} molecule(s) with train")
    run_config = run_config or config.to_dict()
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.tsv"
        if not metrics_path.exists() or state.epoch == 0:
            metrics_path.write_text(file_header(run_config) + "\n" + "\t".join(METRICS_COLUMNS)
                                    + "\n")
    log.info("alternation=%s order=%s", config.alternation, config.order)
    history = []
    for epoch in range(state.epoch, config.epochs):
        t0 = time.perf_counter()
        lr, mean_E, mean_V = train_epoch(state, train, config, epoch, on_step)
        dev_mae = evaluate(dev, state.model, config.batch_size) if dev else math.nan
        state.epoch = epoch + 1
        m = EpochMetrics(epoch + 1, lr, mean_E, mean_V, dev_mae, time.perf_counter() - t0)
        history.append(m)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(m.row() + "\n")
            if dev and dev_mae < state.best_dev_mae:
                state.best_dev_mae = dev_mae
                save_checkpoint(state, out_dir / "best.npz", {"run_config": run_config})
            save_checkpoint(state, out_dir / "final.npz", {"run_config": run_config})
        elif dev and dev_mae < state.best_dev_mae:
            state.best_dev_mae = dev_mae
        if on_epoch:
            on_epoch(m)
    return history
