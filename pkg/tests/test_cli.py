import csv
import json

import pytest

from ricprobe.cli import run
from ricprobe.config import load_config, parse_config, preset_names
from ricprobe.errors import ConfigError

SMALL = """\
master_seed: 7
manifold: {kind: sphere, dim: 2}
probe: {point: [1.0, 0.0, 0.0]}
run: {T: 0.1, n_steps: 10, n_paths: 5000, dump_paths: 3}
"""

NEG = """\
master_seed: 31
manifold:
  kind: halfspace
  dim: 2
  drift: {potential: quadratic, strength: -1.0, center: [0.0, 5.0]}
probe: {point: [0.0, 5.0], test_function: windowed, axis: 0}
run: {T: 0.2, n_steps: 40, n_paths: 20000}
checks:
  - {name: gradient-1, label: k0, p: 2, bounds: {K: 0.0, sigma: 0.0}, negative_control: %s}
"""


def _write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_schema_error_reports_line_and_field(tmp_path, capsys):
    bad = "master_seed: 1\nmanifold:\n  kind: cap\n  theta0: 4.0\n"
    with pytest.raises(ConfigError, match=r"line 4: manifold\.theta0"):
        parse_config(bad)
    code = run(["simulate", "--config", _write(tmp_path, bad), "--out", str(tmp_path / "o")])
    assert code == 2 and "theta0" in capsys.readouterr().err


def test_unknown_key_and_missing_seed_rejected():
    with pytest.raises(ConfigError, match=r"line 4: run\.n_pathz"):
        parse_config(SMALL.replace("n_paths", "n_pathz"))
    with pytest.raises(ConfigError, match="master_seed"):
        parse_config(SMALL.replace("master_seed: 7\n", ""))


@pytest.mark.parametrize("name", preset_names())
def test_every_preset_parses(name):
    cfg = load_config(f"preset:{name}")
    assert len(cfg.digest()) == 64


def test_simulate_outputs_and_worker_invariance(tmp_path):
    cfg = _write(tmp_path, SMALL)
    outs = []
    for workers in ("1", "3"):
        out = tmp_path / f"w{workers}"
        assert run(["simulate", "--config", cfg, "--out", str(out), "--workers", workers]) == 0
        outs.append(out)
    rows = list(csv.DictReader(open(outs[0] / "paths.csv")))
    assert len(rows) == 3 * 11
    assert list(rows[0])[:4] == ["path", "knot", "t", "x0"] and "l" in rows[0] and "discarded" in rows[0]
    assert (outs[0] / "paths.csv").read_bytes() == (outs[1] / "paths.csv").read_bytes()
    a = json.loads((outs[0] / "simulate.json").read_text())
    b = json.loads((outs[1] / "simulate.json").read_text())
    assert a == b


def test_format_filter_and_manifest(tmp_path):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "j"
    assert run(["simulate", "--config", cfg, "--out", str(out), "--format", "json"]) == 0
    assert not (out / "paths.csv").exists()
    m1 = json.loads((out / "manifest.json").read_text())
    assert m1["exit_code"] == 0 and len(m1["config_hash"]) == 64
    out2 = tmp_path / "k"
    run(["simulate", "--config", cfg, "--out", str(out2), "--seed", "8", "--format", "json"])
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m2["config_hash"] != m1["config_hash"] and m2["master_seed"] == 8


def test_empty_check_list(tmp_path):
    out = tmp_path / "e"
    assert run(["check", "--config", _write(tmp_path, SMALL), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "aggregate.csv")))
    assert rows == [["label", "check", "verdict", "margin", "ci", "negative_control"]]


def test_exit_code_reflects_failures(tmp_path):
    out = tmp_path / "n"
    assert run(["check", "--config", _write(tmp_path, NEG % "false"), "--out", str(out)]) == 1
    v = json.loads((out / "manifest.json").read_text())["verdicts"]
    assert v["k0"]["verdict"] == "FAIL"
    # the same failure flagged as a negative control is the expected outcome
    assert run(["check", "--config", _write(tmp_path, NEG % "true", "d.yaml"), "--out", str(tmp_path / "m")]) == 0


def test_presets_listing(capsys):
    assert run(["presets"]) == 0
    assert "heat-oracle" in capsys.readouterr().out
