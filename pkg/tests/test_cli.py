import csv
import hashlib
import json
import shutil
from pathlib import Path

import pytest
import yaml

from bohmsim.cli import MANIFEST, main
from bohmsim.errors import ConfigError
from bohmsim.scenarios import run_scenario

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL_PSI4 = {
    "scenario": "nonequilibrium_psi4", "seed": 3, "M": 4000,
    "grid": [{"points": 256, "min": -20.0, "max": 20.0, "boundary": "periodic"}],
    "propagator": {"method": "split_fourier", "dt": 0.01}, "t_final": 3.0,
}


def _write(tmp_path, name, cfg):
    p = tmp_path / f"{name}.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


@pytest.fixture(scope="module")
def ground_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert main(["run", str(CONFIGS / "multitime_unrecorded_ground_state.yaml"), "--output", str(out)]) == 0
    return out / "multitime_unrecorded_ground_state"


def test_run_directory_layout(ground_run):
    names = {p.name for p in ground_run.iterdir()}
    assert {"config.yaml", "reports.csv", "summary.json", "final_state.bsim", "records.csv", MANIFEST} <= names
    summary = json.loads((ground_run / "summary.json").read_text())
    assert summary["ok"] is True
    assert [t["test"] for t in summary["tests"]] == ["unrecorded:X_equal", "unrecorded:marginal[first]"]
    cfg = yaml.safe_load((ground_run / "config.yaml").read_text())
    assert cfg["seed"] == 20240617 and "plan" in cfg
    with open(ground_run / "reports.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["statistic"] == "0" and rows[0]["passed"] == "true"


def test_manifest_hashes_every_file(ground_run):
    lines = (ground_run / MANIFEST).read_text().splitlines()
    listed = dict(reversed(line.split("  ", 1)) for line in lines)
    assert set(listed) == {p.name for p in ground_run.iterdir() if p.name != MANIFEST}
    for name, digest in listed.items():
        assert hashlib.sha256((ground_run / name).read_bytes()).hexdigest() == digest


def test_verify_exit_codes(ground_run, tmp_path):
    assert main(["verify", str(ground_run)]) == 0
    assert main(["verify", str(ground_run.parent)]) == 0
    tampered = tmp_path / "tampered"
    shutil.copytree(ground_run, tampered)
    with open(tampered / "records.csv", "a") as fh:
        fh.write("extra\n")
    assert main(["verify", str(tampered)]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["verify", str(tmp_path / "empty")]) == 2
    assert main(["verify", str(tmp_path / "missing")]) == 2


def test_verify_rejects_verdict_that_does_not_follow(ground_run, tmp_path):
    bad = tmp_path / "bad"
    shutil.copytree(ground_run, bad)
    reports = (bad / "reports.csv").read_text().replace(",true,", ",false,", 1)
    (bad / "reports.csv").write_text(reports)
    # re-sign the manifest so only the inconsistency remains
    lines = []
    for p in sorted(x for x in bad.iterdir() if x.name != MANIFEST):
        lines.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.name}\n")
    (bad / MANIFEST).write_text("".join(lines))
    assert main(["verify", str(bad)]) == 2


def test_unexpected_verdict_gives_exit_1(tmp_path):
    cfg = _write(tmp_path, "psi4", SMALL_PSI4)
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--output", str(out)]) == 1
    assert main(["verify", str(out / "psi4")]) == 1


def test_config_errors_give_exit_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.yaml")]) == 2
    missing_grid = _write(tmp_path, "g", {"scenario": "free_gaussian", "M": 10, "seed": 1})
    assert main(["run", str(missing_grid), "--output", str(tmp_path)]) == 2
    assert "grid" in capsys.readouterr().err
    unknown = _write(tmp_path, "u", {"scenario": "nothing"})
    assert main(["run", str(unknown), "--output", str(tmp_path)]) == 2
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert main(["run", str(tmp_path / "list.yaml"), "--output", str(tmp_path)]) == 2
    assert main(["run", str(CONFIGS / "free_gaussian.yaml"), "--threads", "0"]) == 2


def test_missing_plan_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        run_scenario({"scenario": "multitime_plan:none.yaml", "M": 10, "seed": 1}, tmp_path)


def test_thread_count_leaves_outputs_identical(tmp_path):
    cfg = _write(tmp_path, "psi4", SMALL_PSI4)
    for threads in ("1", "4"):
        main(["run", str(cfg), "--output", str(tmp_path / f"t{threads}"), "--threads", threads])
    a, b = tmp_path / "t1" / "psi4", tmp_path / "t4" / "psi4"
    assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name
