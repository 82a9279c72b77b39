import json
import subprocess
import sys

import pytest

from atomreload.cli import main

SMALL = """\
[flux]
duration_s = 0.05
[depletion]
n_extractions = 20
trials = 2
[scan]
atoms = 200
trials = 1
points = 5
[bench]
trials = 5
"""

RUNS = [
    ["flux"],
    ["deplete"],
    ["maintain", "--duration", "1", "--mode", "x"],
    ["maintain", "--duration", "1", "--mode", "z"],
    ["coherence"],
    ["rearrange-bench"],
    ["capacity"],
]


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.mark.parametrize("args", RUNS, ids=lambda a: " ".join(a))
def test_same_seed_same_bytes(args, small, tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        rc = main(args + ["--config", str(small), "--seed", "11", "--out", str(out), "--no-check"])
        assert rc == 0
        outs.append(_files(out))
    assert outs[0] == outs[1]
    assert "summary.json" in outs[0]
    for name, data in outs[0].items():
        first = data.split(b"\n", 1)[0]
        if name.endswith(".csv"):
            assert first == b"# format_version=1"
        else:
            assert json.loads(first if name.endswith(".jsonl") else data)["format_version"] == 1


def test_different_seed_changes_output(small, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["deplete", "--config", str(small), "--seed", "1", "--out", str(a), "--no-check"])
    main(["deplete", "--config", str(small), "--seed", "2", "--out", str(b), "--no-check"])
    assert _files(a)["depletion.csv"] != _files(b)["depletion.csv"]


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[flux]\nbogus = 1\n")
    assert main(["flux", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["flux", "--config", str(tmp_path / "absent.ini"), "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_value_exit_code(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["maintain", "--mode", "y"])
    assert exc.value.code == 2
    assert main(["deplete", "--trials", "0", "--out", str(tmp_path)]) == 2


def test_threshold_failure_exit_code(small, tmp_path, capsys):
    strict = tmp_path / "strict.ini"
    strict.write_text(SMALL + "[acceptance]\nflux_atoms = 1.0\n")
    assert main(["flux", "--config", str(strict), "--out", str(tmp_path / "o")]) == 3
    assert "FAIL atoms_per_s" in capsys.readouterr().out
    assert main(["flux", "--config", str(strict), "--out", str(tmp_path / "o"), "--no-check"]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["checks"]["atoms_per_s"] is False


def test_capacity_summary(tmp_path, capsys):
    assert main(["capacity", "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["required_qubits_per_s"] == pytest.approx(15_000)


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "atomreload.cli", "capacity", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "required_qubits_per_s" in out.stdout
