import json
import subprocess
import sys

import numpy as np
import pytest

from elastid import pipeline
from elastid.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from elastid.config import RunConfig, SweepSpec, config_digests, load_config
from elastid.errors import NumericError, SchemaError, ValidationError
from elastid.fem import ParameterBox
from elastid.mesh import load_mesh
from elastid.observation import observation_labels

SMALL = {
    "sweep": {"n_E": 2, "n_nu": 2, "n_val": 2, "seed": 3},
    "training": {"total_epochs": 50, "block_epochs": 50, "batch_size": 2},
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("run")
    assert main(["--config", str(small_config), "--out-dir", str(out), "generate"]) == EXIT_OK
    assert main(["--config", str(small_config), "--out-dir", str(out), "train"]) == EXIT_OK
    return out


def cli(*args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------- config


def test_config_loading(tmp_path, small_config):
    cfg = load_config(small_config)
    assert cfg.sweep.n_train == 4 and cfg.training.total_epochs == 50
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sweep": {"n_E": 2, "bogus": 1}}))
    with pytest.raises(ValidationError, match="bogus"):
        load_config(bad)
    bad.write_text(json.dumps({"nonsense": {}}))
    with pytest.raises(ValidationError):
        load_config(bad)
    bad.write_text("{")
    with pytest.raises(ValidationError):
        load_config(bad)
    with pytest.raises(ValidationError):
        SweepSpec(n_E=1)
    narrow = tmp_path / "narrow.json"
    narrow.write_text(json.dumps({"sweep": {"box": {"E_min": 6e10, "E_max": 8e10}}}))
    assert load_config(narrow).estimator.box.E_min == 6e10
    a, b = config_digests(RunConfig()), config_digests(RunConfig())
    assert a == b and set(a) == {"mesh", "fe", "observation", "training", "estimator", "sweep"}
    assert RunConfig().with_seed(9).sweep.seed == 9 and RunConfig().with_seed(9).training.rng_seed == 9


def test_sweep_points_corners():
    grid, val = pipeline.sweep_points(SweepSpec(n_E=2, n_nu=2, n_val=50, seed=1))
    box = ParameterBox()
    assert grid.tolist() == [[box.E_min, box.nu_min], [box.E_min, box.nu_max],
                             [box.E_max, box.nu_min], [box.E_max, box.nu_max]]
    assert all(box.contains(p) for p in val)
    again = pipeline.sweep_points(SweepSpec(n_E=2, n_nu=2, n_val=50, seed=1))[1]
    assert np.array_equal(val, again)


# ---------------------------------------------------------------- generate


def test_generate_rows_and_resolve_oracle(small_run, small_config):
    cfg = load_config(small_config)
    train = pipeline.read_dataset(small_run / pipeline.TRAIN_FILE, cfg.sweep.box)
    val = pipeline.read_dataset(small_run / pipeline.VAL_FILE, cfg.sweep.box)
    assert len(train) == 4 and len(val) == 2
    box = cfg.sweep.box
    assert {tuple(p) for p in train.inputs} == {(E, nu) for E in (box.E_min, box.E_max)
                                                for nu in (box.nu_min, box.nu_max)}
    assert train.metadata["split"] == "train" and train.metadata["failed"] == []
    for ds in (train, val):
        for i in range(min(3, len(ds))):
            y = pipeline.synthetic_observation(cfg, ds.inputs[i])
            assert np.abs(y - ds.outputs[i]).max() <= 1e-12 * np.abs(y).max()


def test_generate_jobs_byte_identical(tmp_path, small_config):
    for jobs in (1, 2):
        assert cli("--config", small_config, "--jobs", jobs, "--out-dir", tmp_path / f"j{jobs}", "generate") == 0
    for name in ("train.csv", "val.csv", "train.meta.json", "val.meta.json"):
        assert (tmp_path / "j1" / name).read_bytes() == (tmp_path / "j2" / name).read_bytes()


def test_generate_aborts_on_failures(tmp_path, monkeypatch, caplog):
    calls = {"n": 0}
    real = pipeline.solve_observation

    def flaky(task):
        calls["n"] += 1
        return (None, "forced failure") if calls["n"] == 1 else real(task)

    cfg = RunConfig(sweep=SweepSpec(n_E=2, n_nu=2, n_val=0))
    monkeypatch.setattr(pipeline, "solve_observation", flaky)
    with pytest.raises(NumericError, match="1 of 4"):
        pipeline.generate(cfg, tmp_path / "a")
    assert "forced failure" in caplog.text

    # one failure in 21 solves stays under the threshold: row excluded, run continues
    calls["n"] = 0
    cfg = RunConfig(sweep=SweepSpec(n_E=7, n_nu=3, n_val=0))
    summary = pipeline.generate(cfg, tmp_path / "b")
    assert summary == {"train": 20, "val": 0, "failed": 1}
    meta = json.loads((tmp_path / "b" / "train.meta.json").read_text())
    assert len(meta["failed"]) == 1 and meta["failed"][0]["reason"] == "forced failure"


def test_read_dataset_errors(tmp_path):
    bad = tmp_path / "train.csv"
    bad.write_text("E,nu,wrong\n1,2,3\n")
    with pytest.raises(SchemaError):
        pipeline.read_dataset(bad)
    pipeline.write_dataset(bad, np.array([[1e12, 0.3]]), np.zeros((1, 50)))
    with pytest.raises(SchemaError, match="outside"):
        pipeline.read_dataset(bad, ParameterBox())


# ---------------------------------------------------------------- train


def test_train_outputs_and_rerun(small_run, small_config, tmp_path):
    hist = (small_run / pipeline.HISTORY_FILE).read_text().splitlines()
    # header, the initial-weights row, then one row per epoch
    assert len(hist) == 52 and hist[1].split(",")[3] == "init"
    col = hist[0].split(",").index("val_loss")
    vals = [float(r.split(",")[col]) for r in hist[1:]]
    assert all(np.isfinite(vals))
    doc = json.loads((small_run / pipeline.MANIFEST).read_text())
    assert [r["command"] for r in doc["runs"]] == ["generate", "train"]
    before = float(hist[1].split(",")[col])
    assert vals[-1] <= before
    assert cli("--config", small_config, "--out-dir", tmp_path, "train", "--data-dir", small_run) == 0
    for name in (pipeline.NETWORK_FILE, pipeline.HISTORY_FILE):
        assert (tmp_path / name).read_bytes() == (small_run / name).read_bytes()


def test_train_missing_dataset(tmp_path, capsys):
    assert cli("--out-dir", tmp_path, "train") == EXIT_IO
    assert "I/O error" in capsys.readouterr().err


# ---------------------------------------------------------------- estimate, surface, bench


def test_estimate_cli(small_run, small_config, capsys):
    code = cli("--config", small_config, "--out-dir", small_run, "estimate", "--method", "bfgs",
               "--truth", "7.45e10,0.3481")
    out = capsys.readouterr().out
    summary = json.loads(out)
    assert code in (EXIT_OK, EXIT_NUMERIC)
    assert (code == EXIT_OK) == (summary["status"] == "converged")
    assert {"E", "nu", "iterations", "rel_error_E", "rel_error_nu", "wall_time_s"} <= set(summary)
    saved = json.loads((small_run / "estimate_bfgs.json").read_text())
    assert "wall_time_s" not in saved and saved["E"] == summary["E"]
    trace = (small_run / "trace_bfgs.csv").read_text().splitlines()
    assert trace[0] == "iter,E,nu,objective,grad_norm,eta,ls_trials"
    # the observation written alongside reproduces the run
    u, truth = pipeline.read_observation(small_run / "u_obs_bfgs.csv")
    assert np.array_equal(truth, [7.45e10, 0.3481])
    code2 = cli("--config", small_config, "--out-dir", small_run, "estimate", "--method", "bfgs",
                "--obs", small_run / "u_obs_bfgs.csv")
    assert code2 == code and json.loads(capsys.readouterr().out)["E"] == summary["E"]


def test_estimate_usage_errors(small_run, capsys):
    assert cli("--out-dir", small_run, "estimate", "--method", "newton", "--truth", "7e10,0.3") == EXIT_USAGE
    assert cli("--out-dir", small_run, "estimate", "--method", "bfgs") == EXIT_USAGE
    assert cli("--out-dir", small_run, "estimate", "--method", "bfgs", "--truth", "7e10") == EXIT_USAGE
    assert cli("--out-dir", small_run, "--jobs", "0", "mesh") == EXIT_USAGE
    assert cli("frobnicate") == EXIT_USAGE
    assert cli("--out-dir", small_run, "estimate", "--method", "grad", "--obs", small_run / "nope.csv") == EXIT_IO
    assert cli("--out-dir", small_run, "estimate", "--method", "grad", "--max-iter", "2",
               "--truth", "7e10,0.33") == EXIT_NUMERIC
    assert cli("--out-dir", small_run, "estimate", "--method", "grad", "--start", "1e15,0.3",
               "--truth", "7e10,0.33") == EXIT_NUMERIC
    capsys.readouterr()


def test_surface_cli(small_run, small_config, capsys):
    code = cli("--config", small_config, "--out-dir", small_run, "surface", "--truth", "7.5e10,0.35",
               "--which", "both", "--n-E", 3, "--n-nu", 2)
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["N"]["shape"] == [3, 2] and summary["h"]["shape"] == [3, 2]
    rows = (small_run / "surface_h.csv").read_text().splitlines()
    assert rows[0] == "E,nu,F_value" and len(rows) == 7
    first = (small_run / "surface_h.csv").read_bytes()
    assert cli("--out-dir", small_run, "--jobs", 2, "surface", "--truth", "7.5e10,0.35", "--which", "h",
               "--n-E", 3, "--n-nu", 2) == EXIT_OK
    assert (small_run / "surface_h.csv").read_bytes() == first
    assert cli("--out-dir", small_run, "surface", "--truth", "7.5e10,0.35", "--n-E", 1) == EXIT_USAGE


def test_mesh_cli_round_trip(tmp_path, capsys):
    assert cli("--out-dir", tmp_path, "mesh") == EXIT_OK
    mesh = load_mesh(tmp_path / "mesh.txt")
    assert (mesh.n_vertices, mesh.n_triangles) == (231, 400)
    assert cli("--out-dir", tmp_path, "mesh", "--h", "0.5", "--output", "coarse.txt") == EXIT_OK
    assert load_mesh(tmp_path / "coarse.txt").n_vertices == 15
    assert cli("--out-dir", tmp_path, "mesh", "--h", "-1") == EXIT_USAGE
    assert cli("--out-dir", tmp_path, "mesh", "--h", "abc") == EXIT_USAGE
    manifest = pipeline.RunManifest.load(tmp_path)
    assert manifest.verify() == []
    assert set(manifest.files) == {"mesh.txt", "coarse.txt"}
    (tmp_path / "mesh.txt").write_text("tampered")
    assert manifest.verify() == ["mesh.txt"]
    capsys.readouterr()


def test_solve_cli(tmp_path, capsys):
    assert cli("--out-dir", tmp_path, "solve", "--params", "7.5e10,0.35") == EXIT_OK
    names = sorted(p.name for p in tmp_path.glob("snapshot_*.txt"))
    assert names == ["snapshot_0025.txt", "snapshot_0050.txt"]
    assert cli("--out-dir", tmp_path, "solve", "--params", "7.5e10,0.6") == EXIT_USAGE
    capsys.readouterr()


def test_manifest_completeness(small_run):
    manifest = pipeline.RunManifest.load(small_run)
    on_disk = {p.name for p in small_run.iterdir() if p.name != pipeline.MANIFEST}
    assert on_disk <= set(manifest.files)
    assert manifest.verify() == []
    run = json.loads((small_run / pipeline.MANIFEST).read_text())["runs"][0]
    assert {"tool_version", "config_digests", "seeds", "started", "finished", "files"} <= set(run)


def test_bench(small_run, capsys):
    reports = []
    for _ in range(2):
        assert cli("--out-dir", small_run, "bench", "--calls", 2000, "--fe-solves", 2) == EXIT_OK
        reports.append(json.loads(capsys.readouterr().out))
    for r in reports:
        assert {"surrogate_mean_s", "surrogate_std_s", "fe_mean_s", "fe_std_s", "ratio"} <= set(r)
        assert r["surrogate_std_s"] >= 0 and r["folded_max_rel_deviation"] < 1e-10
    a, b = reports[0]["ratio"], reports[1]["ratio"]
    assert max(a, b) / min(a, b) <= 10.0
    assert cli("--out-dir", small_run, "bench", "--calls", 0) == EXIT_USAGE


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "elastid.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("mesh", "generate", "train", "estimate", "surface", "solve", "bench"):
        assert cmd in res.stdout
    assert observation_labels()[0]  # labels importable without side effects
