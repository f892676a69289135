import csv
import json
import shutil
import subprocess
import sys
import time
from importlib import resources

import numpy as np
import pytest

from mixbart.cli import main
from mixbart.interpret import EFFECT_COLUMNS, read_effects_csv
from mixbart.nbgibbs import PosteriorStore

DATA = resources.files("mixbart") / "data"


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """Copy the bundled example and run one fit through a real subprocess."""
    root = tmp_path_factory.mktemp("smoke")
    for name in ("smoke_panel.csv", "smoke_adjacency.txt", "smoke_config.toml"):
        shutil.copy(DATA / name, root / name)
    out = root / "fit"
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "mixbart.cli", "fit", "--config", str(root / "smoke_config.toml"),
                           "--out", str(out)], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    return root, out, elapsed, proc.stdout


def test_smoke_fit_runs_fast_and_writes_store(smoke):
    root, out, elapsed, stdout = smoke
    assert elapsed < 60
    for name in ("meta.json", "trees.jsonl", "summary.csv", "manifest.json", "xi.bin", "surface.bin"):
        assert (out / name).exists()
    assert "beta[x_1]" in stdout
    store = PosteriorStore.load(out)
    assert store.n_draws == 100


def test_store_meta_echoes_config(smoke):
    _, out, _, _ = smoke
    meta = json.loads((out / "meta.json").read_text())
    assert meta["seed"] == 7
    assert (meta["n_burn"], meta["n_save"], meta["thin"]) == (300, 100, 2)
    assert meta["config"]["bart"]["n_trees"] == 10
    assert meta["exposure_names"] == ["z_1", "z_2", "z_3"]
    assert meta["region_ids"] == ["R01", "R02", "R03", "R04"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"data", "adjacency", "config"}


def test_rerun_is_byte_identical(smoke, tmp_path):
    root, out, _, _ = smoke
    again = tmp_path / "again"
    assert main(["fit", "--config", str(root / "smoke_config.toml"), "--out", str(again)]) == 0
    for name in ("meta.json", "trees.jsonl", "surface.bin", "xi.bin", "summary.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_output_dir_guard(smoke, tmp_path):
    root, out, _, _ = smoke
    other = tmp_path / "other.csv"
    text = (root / "smoke_panel.csv").read_text().replace("R01,0,", "R01,0,1", 1)
    other.write_text(text)
    args = ["fit", "--config", str(root / "smoke_config.toml"), "--data", str(other), "--out", str(out),
            "--burn", "2", "--save", "2", "--thin", "1"]
    assert main(args) == 2


@pytest.mark.parametrize("mode, extra, stem", [
    ("ale1", ["--exposure", "z_1"], "ale1_z_1"),
    ("ale2", ["--exposure", "z_1", "--exposure2", "z_2", "--bins", "5"], "ale2_z_1_z_2"),
    ("pd", ["--exposure", "z_2", "--bins", "10"], "pd_z_2"),
    ("fixed", ["--exposure", "z_3", "--bins", "10"], "fixed_z_3"),
])
def test_ale_modes(smoke, tmp_path, mode, extra, stem):
    root, out, _, _ = smoke
    assert main(["ale", "--store", str(out), "--data", str(root / "smoke_panel.csv"), "--mode", mode,
                 "--out", str(tmp_path), *extra]) == 0
    path = tmp_path / f"{stem}.csv"
    with open(path) as fh:
        assert next(csv.reader(fh)) == list(EFFECT_COLUMNS)
    rows = read_effects_csv(path)
    assert rows and all(r.mode == mode for r in rows)
    assert all(r.lo95 <= r.mean <= r.hi95 for r in rows)


def test_ale1_default_trim(smoke, tmp_path):
    root, out, _, _ = smoke
    base = ["ale", "--store", str(out), "--data", str(root / "smoke_panel.csv"), "--exposure", "z_1", "--bins", "10"]
    main([*base, "--out", str(tmp_path / "a")])
    main([*base, "--trim", "1.0", "--out", str(tmp_path / "b")])
    assert len(read_effects_csv(tmp_path / "a" / "ale1_z_1.csv")) < len(read_effects_csv(tmp_path / "b" / "ale1_z_1.csv"))


def test_ale2_emits_full_surface(smoke, tmp_path):
    root, out, _, _ = smoke
    assert main(["ale", "--store", str(out), "--data", str(root / "smoke_panel.csv"), "--mode", "ale2",
                 "--exposure", "z_1", "--exposure2", "z_3", "--bins", "5", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "ale2_z_1_z_3.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 25
    assert {r["flag"] for r in rows} <= {"", "imputed"}
    assert len({(r["grid_1"], r["grid_2"]) for r in rows}) == 25


def test_decile_mode(smoke, tmp_path):
    root, out, _, _ = smoke
    assert main(["ale", "--store", str(out), "--data", str(root / "smoke_panel.csv"), "--mode", "decile",
                 "--out", str(tmp_path)]) == 0
    rows = read_effects_csv(tmp_path / "decile.csv")
    assert len(rows) == 9
    mid = [r for r in rows if r.grid_1 == 0.5][0]
    assert mid.mean == mid.lo95 == mid.hi95 == 1.0


def test_waic_command(smoke, tmp_path):
    root, out, _, _ = smoke
    assert main(["waic", "--store", str(out), "--data", str(root / "smoke_panel.csv"), "--out", str(tmp_path)]) == 0
    with open(tmp_path / "waic.csv") as fh:
        row = next(csv.DictReader(fh))
    w, lppd, p = float(row["waic"]), float(row["lppd"]), float(row["p_waic"])
    assert w == pytest.approx(-2 * (lppd - p))
    with open(tmp_path / "waic_pointwise.csv") as fh:
        pointwise = list(csv.DictReader(fh))
    assert len(pointwise) == 80
    assert sum(float(r["waic"]) for r in pointwise) == pytest.approx(w)


def test_simulate_command(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text("lattice = [2, 2]\ndays = 10\nn_exposures = 5\ntrees = [3]\nsoft = [true, false]\n"
                   "[schedule]\nn_burn = 5\nn_save = 5\nthin = 1\n")
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--replicates", "2", "--seed", "3", "--out", str(out),
                 "--keep-fits"]) == 0
    with open(out / "surface_metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["soft"] for r in rows] == ["true", "false"]
    assert len(list((out / "fits").glob("*.npz"))) == 4
    with open(out / "parameters.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 16


def test_exit_codes(smoke, tmp_path, capsys):
    root, out, _, _ = smoke
    panel = str(root / "smoke_panel.csv")
    # configuration errors
    assert main(["ale", "--store", str(out), "--data", panel, "--exposure", "nope", "--out", str(tmp_path)]) == 2
    assert "valid names: z_1, z_2, z_3" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[bart]\nn_trees = 5\nmystery = 1\n")
    assert main(["fit", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    # data errors
    assert main(["waic", "--store", str(tmp_path), "--data", panel, "--out", str(tmp_path)]) == 3
    broken = tmp_path / "broken.csv"
    broken.write_text((root / "smoke_panel.csv").read_text().replace("R02", "R99"))
    assert main(["fit", "--config", str(root / "smoke_config.toml"), "--data", str(broken),
                 "--out", str(tmp_path / "y")]) == 3
    assert "R99" in capsys.readouterr().err
    assert main(["fit", "--config", str(root / "smoke_config.toml"), "--data", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "z")]) == 3
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_threads_env(monkeypatch, smoke, tmp_path):
    root, out, _, _ = smoke
    monkeypatch.setenv("MIXBART_THREADS", "many")
    args = ["fit", "--config", str(root / "smoke_config.toml"), "--out", str(tmp_path / "t")]
    assert main(args) == 2
