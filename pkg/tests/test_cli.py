import json
import subprocess
import sys

import pytest

from hfo2ps.cli import main


def _config(tmp_path, **extra):
    doc = {
        "instance": {"generator": "basis-mixture", "num_states": 3, "num_actions": 2, "horizon": 4, "dim": 3, "seed": 0},
        "adversary": {"kind": "oblivious-sequence", "seed": 1},
        "K": 4,
    }
    doc.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_run_writes_reproducible_outputs(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / "a"), "--format", "csv,json,svg"]) == 0
    assert main(["run", "--config", cfg, "--out-dir", str(tmp_path / "b"), "--format", "csv"]) == 0
    a = (tmp_path / "a" / "run.csv").read_bytes()
    assert a == (tmp_path / "b" / "run.csv").read_bytes()
    assert (tmp_path / "a" / "run.svg").exists()
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert set(json.loads(last)) == {"final_regret", "containment_rate", "max_projection_sweeps"}


def test_seed_override_changes_run(tmp_path):
    cfg = _config(tmp_path)
    main(["run", "--config", cfg, "--out-dir", str(tmp_path / "a"), "--format", "csv"])
    main(["run", "--config", cfg, "--seed", "9", "--out-dir", str(tmp_path / "b"), "--format", "csv"])
    assert (tmp_path / "a" / "run.csv").read_bytes() != (tmp_path / "b" / "run.csv").read_bytes()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert main(["run", "--config", _config(tmp_path, bogus=1)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.json")]) == 2


def test_bad_format_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--config", _config(tmp_path), "--format", "xlsx"])
    assert exc.value.code == 2


def test_sweep_prints_rows_and_slope(tmp_path, capsys):
    cfg = _config(tmp_path, algorithm="uniform-policy")
    assert main(["sweep", "--config", cfg, "--axis", "K", "--values", "2,4", "--seeds", "2",
                 "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "K=2:" in out and "K=4:" in out and "log-log slope" in out
    table = json.loads((tmp_path / "sweep_K.json").read_text())
    assert [r["runs"] for r in table["rows"]] == [2, 2]


def test_verify_list_and_subset(tmp_path, capsys):
    assert main(["verify", "--list"]) == 0
    names = capsys.readouterr().out.split()
    assert "projection.linear_oracle" in names and "mdp.model_invariants" in names
    assert main(["verify", "--only", "projection.linear_oracle", "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert doc[0]["name"] == "projection.linear_oracle" and doc[0]["passed"]


def test_verify_unknown_check_exits_2():
    assert main(["verify", "--only", "no.such.check"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hfo2ps", "verify", "--list"], capture_output=True, text=True)
    assert out.returncode == 0 and "harness.csv_determinism" in out.stdout
