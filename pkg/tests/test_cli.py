import logging

import numpy as np
import pytest

from qdf import cli
from qdf.dataset import load_prepared, read_tsv
from qdf.toydata import generate
from qdf.trainer import evaluate, load_checkpoint, predict

from conftest import WATER_XYZ

SMALL_CFG = "n_orbitals: 8\nhk_width: 8\nenergy_layers: 2\nhk_layers: 2\nbatch_size: 4\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.yaml").write_text(SMALL_CFG)
    (root / "toy.xyz").write_text(generate(10, seed=3, max_heavy=3))
    (root / "large.xyz").write_text(generate(6, seed=4, min_heavy=4, max_heavy=5,
                                             start_index=1000))
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(work):
    assert run("preprocess", work / "toy.xyz", "--output", work / "data") == 0
    return work / "data"


@pytest.fixture(scope="module")
def trained(work, dataset):
    out = work / "run"
    assert run("train", dataset, "--output", out, "--config", work / "small.yaml",
               "--epochs", 50, "--deterministic") == 0
    return out


def test_preprocess_manifest(dataset):
    lines = (dataset / "manifest.tsv").read_text().splitlines()
    assert lines[0].startswith("# qdf ")
    rows = read_tsv(dataset / "manifest.tsv")
    assert len(rows) == 10
    splits = [r["split"] for r in rows]
    assert (splits.count("train"), splits.count("dev"), splits.count("test")) == (8, 1, 1)
    data = load_prepared(dataset)
    for row in rows:
        assert int(row["grid_points"]) == data.grids[row["id"]].count
    for name in ("molecules.xyz", "geometry.npz", "dataset.yaml"):
        assert (dataset / name).exists()


def test_preprocess_size_filter(work, tmp_path):
    assert run("preprocess", work / "large.xyz", work / "toy.xyz", "--output", tmp_path / "d",
               "--max-atoms", 14, "--min-atoms", 1) == 0
    rows = read_tsv(tmp_path / "d" / "manifest.tsv")
    assert rows and all(int(r["n_atoms"]) <= 14 for r in rows)
    assert len(rows) < 16


def test_preprocess_unreadable_path(tmp_path, caplog):
    missing = tmp_path / "nope.xyz"
    with caplog.at_level(logging.ERROR):
        assert run("preprocess", missing, "--output", tmp_path / "d") == cli.EXIT_IO
    assert str(missing) in caplog.text
    assert not (tmp_path / "d").exists()


def test_preprocess_parse_error_cleans_up(work, tmp_path, caplog):
    bad = tmp_path / "bad.xyz"
    bad.write_text(generate(3, seed=1) + WATER_XYZ.replace("H\t-0.7572", "Xx\t-0.7572"))
    with caplog.at_level(logging.ERROR):
        assert run("preprocess", bad, "--output", tmp_path / "d") == cli.EXIT_DATA
    assert f"{bad}:" in caplog.text
    assert not (tmp_path / "d").exists()


def test_config_error_exit(work, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("unknown_key: 1\n")
    assert run("preprocess", work / "toy.xyz", "--output", tmp_path / "d",
               "--config", cfg) == cli.EXIT_CONFIG


def test_resolved_config_echoed(work, tmp_path, capfd):
    run("check-gradients", "--n-orbitals", 4, "--layers", 1)
    err = capfd.readouterr().err
    assert "# resolved configuration" in err and "n_orbitals: 200" in err


def test_train_smoke(trained):
    rows = read_tsv(trained / "metrics.tsv")
    assert len(rows) == 50
    assert float(rows[-1]["loss_E"]) < float(rows[0]["loss_E"])
    assert (trained / "final.npz").exists() and (trained / "best.npz").exists()
    assert (trained / "config.yaml").read_text().startswith("# qdf ")


def test_train_resume_continues(work, dataset, trained, tmp_path):
    out = tmp_path / "resumed"
    assert run("train", dataset, "--output", out, "--config", work / "small.yaml",
               "--epochs", 53, "--resume", trained / "final.npz") == 0
    rows = read_tsv(out / "metrics.tsv")
    assert [int(r["epoch"]) for r in rows] == [51, 52, 53]
    prev = float(read_tsv(trained / "metrics.tsv")[-1]["loss_E"])
    assert float(rows[0]["loss_E"]) < 2 * prev


def test_train_checkpoint_conflict(dataset, trained, tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        code = run("train", dataset, "--output", tmp_path / "x", "--epochs", 60,
                   "--resume", trained / "final.npz")
    assert code == cli.EXIT_CONFIG
    assert "n_orbitals" in caplog.text
    assert not (tmp_path / "x" / "metrics.tsv").exists()


def test_predict_matches_evaluate(work, dataset, trained, tmp_path):
    out = tmp_path / "pred.tsv"
    assert run("predict", trained / "final.npz", work / "toy.xyz", "--output", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# qdf ")
    rows = read_tsv(out)
    assert len(rows) == 10
    state, _ = load_checkpoint(trained / "final.npz")
    data = load_prepared(dataset)
    sample = data.inputs("train", state.model.basis.skeleton)[0]
    row = next(r for r in rows if r["id"] == sample.id)
    expected = predict([sample], state.model)[0]
    assert float(row["energy_kcal_mol"]) == pytest.approx(expected, rel=1e-12, abs=1e-9)
    assert abs(expected - sample.target) == evaluate([sample], state.model)
    assert float(row["target_kcal_mol"]) == pytest.approx(data.targets[sample.id], rel=1e-12)


def test_predict_empty_input(trained, tmp_path):
    empty = tmp_path / "empty.xyz"
    empty.write_text("")
    out = tmp_path / "pred.tsv"
    assert run("predict", trained / "final.npz", empty, "--output", out) == 0
    assert read_tsv(out) == []


def test_predict_bad_records(work, trained, tmp_path):
    mixed = tmp_path / "mixed.xyz"
    bad = WATER_XYZ.replace("H\t-0.7572", "Xx\t-0.7572")
    mixed.write_text(generate(2, seed=9) + bad + generate(1, seed=10, start_index=50))
    out = tmp_path / "pred.tsv"
    assert run("predict", trained / "final.npz", mixed, "--output", out) == 0
    assert len(read_tsv(out)) == 3
    strict_out = tmp_path / "strict.tsv"
    assert run("predict", trained / "final.npz", mixed, "--output", strict_out,
               "--strict") == cli.EXIT_DATA
    assert not strict_out.exists()


def test_eval_extrapolation(work, dataset, trained, tmp_path):
    assert run("preprocess", work / "large.xyz", "--output", tmp_path / "large",
               "--max-atoms", 100) == 0
    reports = []
    for k in range(2):
        out = tmp_path / f"rep{k}"
        assert run("eval-extrapolation", trained / "final.npz", dataset, tmp_path / "large",
                   "--output", out) == 0
        reports.append(((out / "extrapolation_report.tsv").read_bytes(),
                        (out / "extrapolation_curve.tsv").read_bytes()))
    assert reports[0] == reports[1]
    rows = read_tsv(tmp_path / "rep0" / "extrapolation_report.tsv")
    large_sizes = {r.molecule.n_atoms
                   for r in load_prepared(tmp_path / "large").records.values()}
    buckets = {int(r["n_atoms"]) for r in rows if r["set"] == "extrapolation"
               and r["n_atoms"] != "all"}
    assert buckets == large_sizes
    assert all(np.isfinite(float(r["mae_kcal_mol"])) for r in rows)
    curve = read_tsv(tmp_path / "rep0" / "extrapolation_curve.tsv")
    assert max(int(r["n_atoms"]) for r in curve) == max(large_sizes)


def test_eval_extrapolation_target_mismatch(work, dataset, trained, tmp_path, caplog):
    assert run("preprocess", work / "large.xyz", "--output", tmp_path / "zp",
               "--target", "zpve", "--max-atoms", 100) == 0
    with caplog.at_level(logging.ERROR):
        code = run("eval-extrapolation", trained / "final.npz", dataset, tmp_path / "zp",
                   "--output", tmp_path / "r")
    assert code == cli.EXIT_DATA
    assert "atomization_energy_0K" in caplog.text and "zpve" in caplog.text


def test_check_gradients_command(capsys):
    assert run("check-gradients") == 0
    out = capsys.readouterr().out
    assert "log_zeta" in out and "gradient check passed" in out
