import hashlib
import json
import os
import shutil
from pathlib import Path

import pytest
import yaml

from gqhawkes import cli

DATA = Path(__file__).parent / "data"


def _tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("cli")
    cfg = work / "cfg.yaml"
    shutil.copy(DATA / "cli_small.yaml", cfg)
    assert cli.main(["pipeline", "--config", str(cfg)]) == 0
    return work, cfg


def test_pipeline_outputs(pipeline_run):
    work, _ = pipeline_run
    out = work / "out"
    for stage in cli.STAGES:
        m = json.loads((out / stage / "manifest.json").read_text())
        assert m["stage"] == stage
        for name, digest in m["outputs"].items():
            assert hashlib.sha256((out / stage / name).read_bytes()).hexdigest() == digest
    for name in ("table1_volumes.csv", "table2_contributions.csv", "table3_ratios.csv",
                 "fig1_phi_norms.csv", "fig6_flux.csv"):
        text = (out / "report" / name).read_text()
        assert text.startswith("# gqhawkes ")
    flux = json.loads((out / "liquidity" / "flux.json").read_text())
    assert "J" in flux and "provenance" in flux
    header = (out / "liquidity" / "signals.csv").read_text().splitlines()[1]
    assert header.split(",")[-6:] == ["t", "sigma2", "mu", "mu2", "T", "seff"]


def test_rerun_is_byte_identical(pipeline_run, tmp_path):
    work, cfg = pipeline_run
    before = _tree_hashes(work / "out")
    other = tmp_path / "cfg.yaml"
    shutil.copy(cfg, other)
    assert cli.main(["pipeline", "--config", str(other)]) == 0
    assert _tree_hashes(tmp_path / "out") == before


def test_missing_upstream_exit_code(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    shutil.copy(DATA / "cli_small.yaml", cfg)
    assert cli.main(["calibrate", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "moments" in err and "manifest.json" in err


def test_bad_route_exit_code(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    shutil.copy(DATA / "cli_small.yaml", cfg)
    with pytest.raises(SystemExit) as exc:
        cli.main(["calibrate", "--config", str(cfg), "--route", "sideways"])
    assert exc.value.code == 2
    data = yaml.safe_load(cfg.read_text())
    data["calibrate"]["route"] = "sideways"
    cfg.write_text(yaml.safe_dump(data))
    assert cli.main(["calibrate", "--config", str(cfg)]) == 2


def test_stale_config_refused(pipeline_run, tmp_path, capsys):
    work, cfg = pipeline_run
    shutil.copytree(work / "out", tmp_path / "out")
    data = yaml.safe_load(cfg.read_text())
    data["grids"]["price"]["n_log"] = 11
    new = tmp_path / "cfg.yaml"
    new.write_text(yaml.safe_dump(data))
    assert cli.main(["calibrate", "--config", str(new)]) == 3
    assert "stale" in capsys.readouterr().err


def test_tampered_output_refused(pipeline_run, tmp_path, capsys):
    work, cfg = pipeline_run
    shutil.copytree(work / "out", tmp_path / "out")
    shutil.copy(cfg, tmp_path / "cfg.yaml")
    with open(tmp_path / "out" / "moments" / "moments.npz", "ab") as fh:
        fh.write(b"x")
    assert cli.main(["calibrate", "--config", str(tmp_path / "cfg.yaml")]) == 3
    assert "moments.npz" in capsys.readouterr().err


def test_seed_override_changes_config_hash(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    shutil.copy(DATA / "cli_small.yaml", cfg)
    a = cli.load_config(str(cfg), {})
    b = cli.load_config(str(cfg), {"simulate.seed": 8})
    assert cli.config_hash(a, "simulate") != cli.config_hash(b, "simulate")


def test_seed_out_of_range(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    shutil.copy(DATA / "cli_small.yaml", cfg)
    assert cli.main(["simulate", "--config", str(cfg), "--seed", str(2 ** 64)]) == 2
