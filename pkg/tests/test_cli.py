import json
import subprocess
import sys

import numpy as np
import pytest

from areacap.area import jacobian
from areacap.cli import main
from areacap.fieldio import read_field


def cli(*args) -> int:
    return main([str(a) for a in args])


def write_config(path, body):
    path.write_text(json.dumps(body))
    return path


@pytest.fixture
def identity_field(tmp_path):
    assert cli("gen", "identity-map", "n=2", "shape=128", "--out", tmp_path / "fields", "--name", "id2") == 0
    return tmp_path / "fields" / "id2.json"


def test_gen_identity_has_unit_jacobian(identity_field):
    phi = read_field(identity_field)
    assert phi.grid.shape == (128, 128)
    J = jacobian(phi)
    np.testing.assert_allclose(J.values, 1.0, rtol=0, atol=1e-12)


def test_gen_prints_written_path(tmp_path, capsys):
    assert cli("gen", "bump", "dim=1", "shape=17", "--out", tmp_path) == 0
    out = capsys.readouterr().out.strip()
    assert out.endswith("bump.json")
    assert (tmp_path / "bump.json").exists()


def test_gen_unknown_builtin_lists_names(tmp_path, capsys):
    assert cli("gen", "no_such_field", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "no_such_field" in err and "bump" in err and "identity" in err


def test_gen_bad_parameter(tmp_path, capsys):
    assert cli("gen", "bump", "dim=1", "radius", "--out", tmp_path) == 1
    assert "key=value" in capsys.readouterr().err
    assert cli("gen", "bump", "dim=1", "colour=3", "--out", tmp_path) == 1


def test_gen_seed_is_reproducible(tmp_path):
    for run in ("a", "b"):
        assert cli("gen", "smooth_random", "dim=2", "shape=17", "--seed", 3, "--out", tmp_path / run) == 0
    a = read_field(tmp_path / "a" / "smooth_random.json").values
    b = read_field(tmp_path / "b" / "smooth_random.json").values
    np.testing.assert_array_equal(a, b)


def test_run_identity_area_within_tolerance(tmp_path, identity_field):
    cfg = write_config(tmp_path / "area.json", {"kind": "area", "phi_file": "fields/id2.json", "tolerance": 1e-3})
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 0
    records = [json.loads(l) for l in (tmp_path / "out" / "report.jsonl").read_text().splitlines()]
    assert [r["kind"] for r in records] == ["header", "area"]
    assert records[1]["payload"]["rel_error"] <= 1e-3
    assert records[0]["payload"]["config"]["phi_file"] == str(identity_field.resolve())
    assert (tmp_path / "out" / "summary.txt").read_text().splitlines()[0].startswith("kind")


def test_run_missing_field_file_names_path(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"kind": "maximal", "field_file": "nowhere/f.json"})
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "nowhere/f.json" in capsys.readouterr().err


def test_run_missing_config(tmp_path, capsys):
    assert cli("run", "--config", tmp_path / "absent.json") == 1
    assert "absent.json" in capsys.readouterr().err
    assert cli("run") == 1


def test_run_malformed_json_reports_position(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"kind": "area",\n  "phi_file": }')
    assert cli("run", "--config", cfg) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_run_non_object_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "list.json", [1, 2])
    assert cli("run", "--config", cfg) == 1
    assert "JSON object" in capsys.readouterr().err


def test_run_unknown_kind(tmp_path, capsys):
    cfg = write_config(tmp_path / "k.json", {"kind": "teleport"})
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 1
    err = capsys.readouterr().err
    assert "teleport" in err and "capacity" in err


@pytest.mark.parametrize("body, needle", [
    ({"kind": "weak_type", "field_file": "bump.json", "k": 1, "p": 1.0}, "levels"),
    ({"kind": "potential", "field_file": "bump.json"}, "alpha"),
    ({"kind": "capacity", "mask_file": "absent.json", "alpha": 1.0}, "absent.json"),
])
def test_run_missing_required_field(tmp_path, capsys, body, needle):
    assert cli("gen", "bump", "dim=1", "shape=17", "--out", tmp_path) == 0
    cfg = write_config(tmp_path / "c.json", body)
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 1
    assert needle in capsys.readouterr().err


def test_run_negative_seed_rejected(tmp_path, identity_field, capsys):
    cfg = write_config(tmp_path / "c.json", {"kind": "area", "phi_file": "fields/id2.json", "seed": -4})
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "seed" in capsys.readouterr().err


def test_run_violation_exits_2(tmp_path, capsys):
    assert cli("gen", "linear_map", "dim=2", "shape=33", "matrix=[[1.0,0.7],[0.0,1.0]]", "--out", tmp_path,
               "--name", "shear") == 0
    cfg = write_config(tmp_path / "c.json", {"kind": "area", "phi_file": "shear.json", "tolerance": 1e-14})
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 2
    assert "violation" in capsys.readouterr().err
    assert (tmp_path / "out" / "report.jsonl").exists()


def test_run_is_deterministic(tmp_path):
    assert cli("gen", "bump", "dim=2", "shape=33", "--out", tmp_path) == 0
    cfg = write_config(tmp_path / "c.json", {"kind": "chain_checks", "field_file": "bump.json",
                                             "checks": 10, "calibration": 10})
    payloads = []
    for run in ("a", "b"):
        assert cli("run", "--config", cfg, "--out", tmp_path / run, "--seed", 5) in (0, 2)
        payloads.append([json.loads(l)["payload"] for l in (tmp_path / run / "report.jsonl").read_text().splitlines()])
    assert payloads[0] == payloads[1]
    assert payloads[0][0]["seed"] == 5


def test_report_prints_summary(tmp_path, identity_field, capsys):
    cfg = write_config(tmp_path / "a.json", {"kind": "area", "phi_file": "fields/id2.json"})
    assert cli("run", "--config", cfg, "--out", tmp_path / "out") == 0
    capsys.readouterr()
    assert cli("report", tmp_path / "out") == 0
    text = capsys.readouterr().out
    assert "header" in text and "rel_error=" in text
    assert cli("report", tmp_path / "out" / "report.jsonl", "--full") == 0
    assert '"kind": "area"' in capsys.readouterr().out


def test_report_errors(tmp_path, capsys):
    assert cli("report", tmp_path / "none.jsonl") == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"kind": "header"}\n{oops\n')
    assert cli("report", bad) == 1
    assert "line 2" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "areacap", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
