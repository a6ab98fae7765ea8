"""Subcommand implementations behind :mod:`qdf.cli`."""

from __future__ import annotations

import logging
import math
import os
import sys

import yaml

from qdf import cli
from qdf.basis import MissingOrbitalsError, instantiate
from qdf.chem import (InsufficientRecordsError, MissingReferenceError, ParseError,
                      compute_target, iter_xyz_file)
from qdf.config import ConfigError, dataset_config, resolve_config, train_config
from qdf.dataset import DatasetError, load_prepared, preprocess, resolve_basis
from qdf.gradcheck import model_gradient_suite
from qdf.grid import build_grid
from qdf.model import ZeroColumnError, prepare_inputs
from qdf.trainer import (CheckpointError, CheckpointShapeError, LeakageError, NumericalAbort,
                         TrainState, file_header, fit, load_checkpoint, predict,
                         run_extrapolation)

log = logging.getLogger("qdf")


class TargetMismatchError(ValueError):
    pass


def echo_config(cfg: dict) -> None:
    sys.stderr.write("# resolved configuration\n")
    sys.stderr.write(yaml.safe_dump(cfg, sort_keys=True))
    sys.stderr.flush()


def run(args, overrides: dict) -> int:
    try:
        cfg = resolve_config(args.config, overrides)
        if cfg.get("deterministic") and not args.deterministic:
            log.warning("deterministic set in config; BLAS threads already initialized, "
                        "set OPENBLAS_NUM_THREADS=1 or pass --deterministic")
        echo_config(cfg)
        handler = COMMANDS[args.command]
        return handler(args, cfg)
    except (ConfigError, CheckpointShapeError) as exc:
        log.error("configuration error: %s", exc)
        return cli.EXIT_CONFIG
    except (ParseError, DatasetError, MissingReferenceError, InsufficientRecordsError,
            MissingOrbitalsError, LeakageError, TargetMismatchError) as exc:
        log.error("data error: %s", exc)
        return cli.EXIT_DATA
    except (NumericalAbort, ZeroColumnError) as exc:
        log.error("numerical abort: %s", exc)
        return cli.EXIT_NUMERICAL
    except (CheckpointError, OSError) as exc:
        log.error("I/O error: %s", exc)
        return cli.EXIT_IO


def cmd_preprocess(args, cfg: dict) -> int:
    for path in args.raw:
        if not path.is_file():
            raise FileNotFoundError(f"cannot read {path}")
    data = preprocess(args.raw, args.output, cfg, dataset_config(cfg))
    sizes = {s: len(data.ids(s)) for s in ("train", "dev", "test")}
    print(f"wrote {args.output}: {len(data.records)} molecules, split {sizes['train']}/"
          f"{sizes['dev']}/{sizes['test']}, target {data.target_kind}")
    return cli.EXIT_OK


def _grid_settings_from(cfg: dict, settings: dict) -> dict:
    cfg = dict(cfg)
    for key in ("sphere_radius", "grid_interval"):
        if cfg[key] != settings[key]:
            log.info("%s=%s taken from the dataset (config had %s)", key, settings[key],
                     cfg[key])
            cfg[key] = settings[key]
    return cfg


def cmd_train(args, cfg: dict) -> int:
    data = load_prepared(args.dataset)
    if data.target_kind != cfg["target_kind"]:
        log.info("target kind %s taken from the dataset", data.target_kind)
        cfg = dict(cfg, target_kind=data.target_kind)
    cfg = _grid_settings_from(cfg, data.settings)
    tcfg = train_config(cfg)
    skeleton = resolve_basis(cfg)
    if args.resume:
        state, meta = load_checkpoint(args.resume, expected=tcfg.model_config())
        log.info("resuming at epoch %d from %s", state.epoch, args.resume)
        skeleton = state.model.basis.skeleton
    else:
        state = TrainState.create(tcfg, skeleton)
    train = data.inputs("train", skeleton)
    dev = data.inputs("dev", skeleton)
    log.info("train %d, dev %d molecules; %d parameters", len(train), len(dev),
             state.model.parameter_count())
    run_config = dict(cfg, dataset=str(args.dataset))
    args.output.mkdir(parents=True, exist_ok=True)
    (args.output / "config.yaml").write_text(
        file_header(cfg) + "\n" + yaml.safe_dump(run_config, sort_keys=True), encoding="utf-8")

    def report(m):
        print(f"epoch {m.epoch:5d}  lr {m.lr:.3g}  L_E {m.loss_E:.6g}  L_V {m.loss_V:.6g}  "
              f"dev MAE {m.dev_mae:.4f} kcal/mol  {m.seconds:.1f}s", flush=True)

    fit(state, train, dev, tcfg, args.output, run_config=cfg, on_epoch=report)
    print(f"best dev MAE {state.best_dev_mae:.4f} kcal/mol; checkpoints in {args.output}")
    return cli.EXIT_OK


def _checkpoint_run_config(meta: dict) -> dict:
    return meta.get("extra", {}).get("run_config", {})


def cmd_predict(args, cfg: dict) -> int:
    state, meta = load_checkpoint(args.checkpoint)
    trained = _checkpoint_run_config(meta)
    s = float(trained.get("sphere_radius", cfg["sphere_radius"]))
    g = float(trained.get("grid_interval", cfg["grid_interval"]))
    dcfg = dataset_config(cfg)
    model = state.model
    batch_size = int(cfg["batch_size"])
    strict = bool(cfg.get("strict"))
    kind = trained.get("target_kind", dcfg.target_kind)
    if not args.molecules.is_file():
        raise FileNotFoundError(f"cannot read {args.molecules}")
    args.output.parent.mkdir(parents=True, exist_ok=True)
    tmp = args.output.with_name(args.output.name + ".tmp")
    n_done = 0
    skipped: list[str] = []
    try:
        with open(tmp, "w", encoding="utf-8") as out:
            out.write(file_header(cfg) + "\n")
            out.write("id\tn_atoms\tenergy_kcal_mol\ttarget_kcal_mol\n")
            pending, targets = [], []

            def flush():
                for mi, e, t in zip(pending, predict(pending, model, batch_size), targets):
                    out.write(f"{mi.id}\t{mi.n_atoms}\t{float(e)!r}\t{t}\n")
                out.flush()
                pending.clear()
                targets.clear()

            for item in iter_xyz_file(args.molecules, dcfg.schema):
                if isinstance(item, ParseError):
                    if strict:
                        raise item
                    log.warning("skipped: %s", item)
                    skipped.append(str(item))
                    continue
                try:
                    inst = instantiate(item.molecule, model.basis)
                except MissingOrbitalsError as exc:
                    if strict:
                        raise
                    log.warning("skipped %s: %s", item.id, exc)
                    skipped.append(item.id)
                    continue
                try:
                    target = repr(compute_target(item, kind, dcfg.atom_refs,
                                                 dcfg.target_properties))
                except (KeyError, ValueError):
                    target = ""
                grid = build_grid(item.molecule, s, g)
                pending.append(prepare_inputs(item.molecule, grid, inst))
                targets.append(target)
                if len(pending) >= batch_size:
                    n_done += len(pending)
                    flush()
            n_done += len(pending)
            if pending:
                flush()
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, args.output)
    print(f"predicted {n_done} molecule(s), skipped {len(skipped)}; wrote {args.output}")
    return cli.EXIT_OK


def cmd_eval_extrapolation(args, cfg: dict) -> int:
    state, meta = load_checkpoint(args.checkpoint)
    small, large = load_prepared(args.small), load_prepared(args.large)
    if small.target_kind != large.target_kind:
        raise TargetMismatchError(f"target kinds differ: {args.small} has {small.target_kind}, "
                                  f"{args.large} has {large.target_kind}")
    trained_kind = _checkpoint_run_config(meta).get("target_kind")
    if trained_kind and trained_kind != small.target_kind:
        raise TargetMismatchError(f"target kinds differ: checkpoint trained on {trained_kind}, "
                                  f"datasets have {small.target_kind}")
    skeleton = state.model.basis.skeleton
    small_test = small.inputs("test", skeleton)
    large_all = large.inputs(None, skeleton)
    report = run_extrapolation(state.model, small_test, large_all, small.ids("train"),
                               int(cfg["batch_size"]))
    header = file_header(cfg)
    args.output.mkdir(parents=True, exist_ok=True)
    (args.output / "extrapolation_report.tsv").write_text(report.to_tsv(header), encoding="utf-8")
    (args.output / "extrapolation_curve.tsv").write_text(curve_tsv(report, header),
                                                         encoding="utf-8")
    for name, m, count, mae in report.rows:
        print(f"{name:<14} M={m:<3d} n={count:<5d} MAE {mae:.4f} kcal/mol")
    print(f"interpolation MAE {report.interpolation_mae:.4f}, "
          f"extrapolation MAE {report.extrapolation_mae:.4f} kcal/mol")
    return cli.EXIT_OK


def curve_tsv(report, header: str) -> str:
    """One row per molecule size; MAE columns for each set (nan where absent)."""
    by_size: dict[int, dict[str, float]] = {}
    for name, m, _count, mae in report.rows:
        by_size.setdefault(m, {})[name] = mae
    lines = [header, "n_atoms\tinterpolation_mae\textrapolation_mae"]
    for m in sorted(by_size):
        row = by_size[m]
        lines.append(f"{m}\t{row.get('interpolation', math.nan):.6f}\t"
                     f"{row.get('extrapolation', math.nan):.6f}")
    return "\n".join(lines) + "\n"


def cmd_check_gradients(args, cfg: dict) -> int:
    reports = model_gradient_suite(args.sphere_radius, args.grid_interval, args.n_orbitals,
                                   args.layers, args.tolerance, args.step, int(cfg["seed"]))
    ok = True
    for loss, rep in reports.items():
        print(f"d{loss}/dtheta (tolerance {rep.tolerance:g})")
        print(rep.format())
        ok &= rep.passed
    print("gradient check " + ("passed" if ok else "FAILED"))
    return cli.EXIT_OK if ok else cli.EXIT_CHECK_FAILED


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval-extrapolation": cmd_eval_extrapolation,
    "check-gradients": cmd_check_gradients,
}

