from __future__ import annotations

import json
import re
import subprocess
import sys

import pytest

from confmon.cli import EXIT_BUDGET, EXIT_INPUT, EXIT_OK, EXIT_VIOLATION, TRACE_DIR_ENV, main
from confmon.harness.scenario import standard_scenario
from confmon.trace import loads

LEAKY = standard_scenario().dumps().replace("seed=11", "seed=11 mutations=leaky-view")


@pytest.fixture
def scn(tmp_path):
    def write(text=None, name="std.scn"):
        path = tmp_path / name
        path.write_text(standard_scenario().dumps() if text is None else text)
        return str(path)
    return write


@pytest.fixture(autouse=True)
def no_trace_dir(monkeypatch):
    monkeypatch.delenv(TRACE_DIR_ENV, raising=False)


def test_run_clean(scn, tmp_path, capsys):
    trace = tmp_path / "out.trace"
    assert main(["run", scn(), "--seed", "3", "--trace", str(trace)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "all invariants hold" in out
    assert loads(trace.read_text())


def test_run_is_reproducible(scn, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", scn(), "--seed", "8", "--trace", str(a)])
    main(["run", scn(), "--seed", "8", "--trace", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_unseeded_run_prints_its_seed(scn, capsys):
    assert main(["run", scn()]) == EXIT_OK
    assert re.search(r"seed \d+ \(pass --seed \d+ to repeat this run\)", capsys.readouterr().out)


def test_trace_dir_from_environment(scn, tmp_path, monkeypatch):
    monkeypatch.setenv(TRACE_DIR_ENV, str(tmp_path / "traces"))
    main(["run", scn(), "--seed", "4"])
    assert (tmp_path / "traces" / "std-seed4.trace").exists()


def test_run_violation_writes_counterexample(scn, tmp_path, capsys):
    cx = tmp_path / "cx.scn"
    assert main(["run", scn(LEAKY), "--seed", "1", "--counterexample", str(cx)]) == EXIT_VIOLATION
    assert "FAIL  policy.information-flow" in capsys.readouterr().out
    assert main(["replay", str(cx)]) == EXIT_VIOLATION
    assert main(["replay", str(cx), "--without-mutations"]) == EXIT_OK


@pytest.mark.parametrize("text", ["action Bogus(hart=0)\n", "boot harts=x\n",
                                  "boot harts=1\naction CvmStore(hart=0)\n"])
def test_run_bad_input(scn, text):
    assert main(["run", scn(text), "--seed", "1"]) == EXIT_INPUT


def test_run_missing_file(tmp_path):
    assert main(["run", str(tmp_path / "nope.scn")]) == EXIT_INPUT


def test_custom_whitelist(scn, tmp_path):
    from importlib import resources

    table = json.loads(resources.files("confmon.data").joinpath("whitelist.json").read_text())
    good = tmp_path / "wl.json"
    good.write_text(json.dumps(table))
    assert main(["run", scn(), "--seed", "1", "--whitelist", str(good)]) == EXIT_OK
    table["calls"][5]["args"] = [0, 7, 14]  # r14 carries the exit reason
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(table))
    assert main(["run", scn(), "--seed", "1", "--whitelist", str(bad)]) == EXIT_INPUT


def test_check(scn, tmp_path):
    trace = tmp_path / "t.trace"
    main(["run", scn(), "--seed", "2", "--trace", str(trace)])
    assert main(["check", str(trace)]) == EXIT_OK
    leaky = tmp_path / "l.trace"
    main(["run", scn(LEAKY), "--seed", "2", "--trace", str(leaky)])
    assert main(["check", str(leaky)]) == EXIT_VIOLATION
    (tmp_path / "junk").write_text("garbage\n")
    assert main(["check", str(tmp_path / "junk")]) == EXIT_INPUT
    assert main(["check", str(tmp_path / "missing")]) == EXIT_INPUT


def test_explore(capsys, tmp_path):
    assert main(["explore", "--depth", "0"]) == EXIT_OK
    assert "depth reached: 0 of 0" in capsys.readouterr().out
    cx = tmp_path / "cx.scn"
    assert main(["explore", "--depth", "8", "--mutation", "skip-zeroize",
                 "--counterexample", str(cx)]) == EXIT_VIOLATION
    assert main(["replay", str(cx)]) == EXIT_VIOLATION


def test_explore_budget_and_config():
    assert main(["explore", "--depth", "8", "--max-states", "20"]) == EXIT_BUDGET
    assert main(["explore", "--harts", "5"]) == EXIT_INPUT


def test_selftest(capsys):
    assert main(["selftest", "--fault", "leaky-view", "--fault", "key-leak"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ok  leaky-view -> policy.information-flow" in out


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "confmon.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("run", "explore", "replay", "check", "selftest", "demo"):
        assert cmd in proc.stdout
