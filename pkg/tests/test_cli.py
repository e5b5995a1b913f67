import csv
import json

import pytest

from coldisturb.analytics import normalized_refresh_ops
from coldisturb.cli import load_config, main, preset_names, ConfigError


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    return list(csv.DictReader(lines[1:]))


def test_presets_listed():
    assert {"small", "paper-fig-refresh-ops", "prvr-32gb"} <= set(preset_names())


def test_missing_geometry_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"seed": 1}\n')
    assert main(["analytics", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "geometry" in capsys.readouterr().err


def test_unknown_key_reports_line(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "geometry": {"banks": 1,\n    "rowz": 3}\n}\n')
    with pytest.raises(ConfigError, match=r"c\.json:3: geometry"):
        load_config(str(cfg), None, None)


def test_bad_json_and_unknown_preset(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"geometry": ')
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(cfg), None, None)
    with pytest.raises(ConfigError, match="unknown preset"):
        load_config(None, "nope", None)
    with pytest.raises(ConfigError):
        load_config(None, None, None)


def test_seed_override_and_merge(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 4, "geometry": {"rows_per_subarray": 32}}))
    merged = load_config(str(cfg), "small", 9)
    assert merged["seed"] == 9
    assert merged["geometry"]["rows_per_subarray"] == 32
    assert merged["geometry"]["columns_per_row"] == 16


def test_runtime_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"ecc": {"codes": ["sec(136,128)"], "weights": [4], "mode": "exhaustive"}}))
    assert main(["ecc", "--preset", "small", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "exceeds the cap" in capsys.readouterr().err


def test_bad_threads(tmp_path):
    assert main(["ecc", "--preset", "small", "--threads", "0", "--out", str(tmp_path)]) == 2


def test_refresh_ops_preset_matches_formula(tmp_path):
    out = tmp_path / "o"
    assert main(["analytics", "--preset", "paper-fig-refresh-ops", "--out", str(out)]) == 0
    rows = read_csv(out / "refresh_ops.csv")
    assert len(rows) == 44
    assert {float(r["t_strong_s"]) for r in rows} == {0.128, 0.256, 0.512, 1.024}
    for r in rows:
        f, t = float(r["weak_fraction"]), float(r["t_strong_s"])
        assert float(r["normalized_ops"]) == normalized_refresh_ops(f, t)
        assert abs(float(r["discrete_ops"]) - float(r["normalized_ops"])) <= 1 / 8192 + 1e-12
    manifest = json.loads((out / "analytics.manifest.json").read_text())
    assert manifest["subcommand"] == "analytics" and manifest["seed"] == 0
    assert sorted(manifest["outputs"]) == sorted(p.name for p in out.glob("*.csv"))


@pytest.mark.parametrize("command", ["reverse-subarrays", "analytics", "ecc"])
def test_fast_subcommands_deterministic(tmp_path, command):
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert main([command, "--preset", "small", "--out", str(out), "--seed", "5"]) == 0
        outs.append({p.name: p.read_bytes() for p in out.glob("*.csv")})
    assert outs[0] == outs[1] and outs[0]


def test_reverse_subarrays_output(tmp_path):
    assert main(["reverse-subarrays", "--preset", "small", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "subarrays.csv")
    assert len(rows) == 3
