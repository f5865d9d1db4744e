import json
import statistics

import pybmc
from pybmc import cli, report, bench

from pytest import raises
from testutils import run_tests


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_advise(capsys):
    code, out, _ = run(capsys, "advise", "--n", "512", "--cprime", "0.1")
    assert code == cli.EXIT_OK
    assert out.splitlines() == ["T* = 7.155", "T=8, r=64"]

    code, out, _ = run(capsys, "advise", "--n", "2048", "--cprime", "0.1")
    assert code == 0
    assert "T=16, r=128" in out.splitlines()


def test_advise_speculative(capsys):
    argv = ["advise", "--n", "2048", "--cprime", "0.1"]
    code, out, _ = run(capsys, *argv, "--spec-k", "8", "--spec-m", "2")
    assert code == 0
    lines = out.splitlines()
    assert lines[1] == "T=16, r=128"
    # Four candidates per accepted token quadruple T*^2
    assert lines[2] == "speculative T* = 28.62"
    assert lines[3] == "speculative T=32, r=64"

    code, out, _ = run(capsys, *argv, "--spec-k", "4", "--spec-m", "4")
    assert out.splitlines()[3] == "speculative T=16, r=128"

    code, out, _ = run(capsys, *argv, "--spec-m", "2", "--beta-prime-ratio", "2")
    assert code == 0
    assert out.splitlines()[2] == "speculative T* = 10.12"


def test_advise_fails(capsys):
    code, _, err = run(capsys, "advise", "--n", "512")
    assert code == cli.EXIT_USAGE
    assert "--cprime" in err

    code, _, err = run(capsys, "advise", "--n", "512", "--cprime", "-1")
    assert code == 2
    assert err.startswith("pybmc: error:")

    with raises(SystemExit) as exit_info:
        cli.main(["advise", "--cprime", "0.1"])
    assert exit_info.value.code == 2
    with raises(SystemExit) as exit_info:
        cli.main(["frobnicate"])
    assert exit_info.value.code == 2


def test_calibrate(capsys):
    code, out, _ = run(capsys, "calibrate", "--duration", "0.05")
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("alpha_bw = ") and lines[0].endswith(" B/s")
    assert lines[1].startswith("beta_c = ") and lines[1].endswith(" MAC/s")
    assert lines[2].startswith("C' = ")
    assert float(lines[0].split()[2]) > 0
    assert float(lines[1].split()[2]) > 0
    assert float(lines[2].split()[2]) > 0


def test_microbenchmarks():
    assert bench.measure_copy_bandwidth(1 << 20, duration=0.01) > 0
    assert bench.measure_mac_rate(size=32, batch=4, duration=0.01) > 0


def test_calibrate_below_timer_resolution(capsys, monkeypatch):
    monkeypatch.setattr(bench, "MIN_TIMER_TICKS", 1e15)
    with raises(pybmc.CalibrationError):
        bench.measure_copy_bandwidth(1 << 10, duration=0.0)

    code, out, err = run(capsys, "calibrate", "--duration", "0.01")
    assert code == cli.EXIT_USAGE
    assert out == ""
    assert "timer resolution" in err


def test_sweep_json(capsys):
    argv = ["sweep", "--seq-len", "32", "--steps", "4", "--cprime", "0.1"]
    code, out, _ = run(capsys, *argv, "--policy", "iterative", "--policy", "bmc")
    assert code == 0
    r = report.from_json(out)
    assert [p.T for p in r.points] == [32, 1, 2, 4, 8, 16, 32]
    assert r.points[0].policy == "iterative"
    assert r.points[1].policy == "bmc(32)"
    assert r.config["steps"] == 4
    for p in r.points:
        assert p.copy_elems >= 0 and p.sdpa_macs > 0
        assert p.model_time_s > 0


def test_sweep_model_column(capsys, tmp_path):
    path = str(tmp_path / "sweep.csv")
    argv = ["sweep", "--seq-len", "512", "--steps", "4", "--cprime", "0.1"]
    argv += ["--policy", "bmc", "--allocs", "1,2,4,8,16,32,64", "--out", path]
    code, out, _ = run(capsys, *argv, "--format", "csv")
    assert code == 0 and out == ""

    r = report.read_report(path)
    best = min(r.points, key=lambda p: p.model_time_s)
    assert best.T == 8 and best.r == 64
    with open(path, encoding="utf-8") as f:
        assert f.readline().strip() == ",".join(report.COLUMNS)


def test_sweep_chunk(capsys):
    argv = ["sweep", "--seq-len", "32", "--steps", "2", "--cprime", "0.2"]
    code, out, _ = run(capsys, *argv, "--policy", "bmc", "--chunk", "8")
    assert code == 0
    points = report.from_json(out).points
    assert len(points) == 1 and points[0].T == 4 and points[0].r == 8

    with raises(SystemExit):
        cli.main(argv + ["--chunk", "8", "--allocs", "4"])


def test_sweep_invalid_point_flushes_partial(capsys, tmp_path):
    path = str(tmp_path / "sweep.json")
    argv = ["sweep", "--seq-len", "32", "--steps", "2", "--cprime", "0.1"]
    code, _, err = run(capsys, *argv, "--policy", "bmc", "--allocs", "2,3", "--out", path)
    assert code == cli.EXIT_USAGE
    assert "T=3" in err
    points = report.read_report(path).points
    assert [p.T for p in points] == [2]


def test_sweep_speculative(capsys):
    argv = ["sweep", "--seq-len", "32", "--steps", "8", "--cprime", "0.1"]
    argv += ["--policy", "upfront", "--policy", "bmc", "--allocs", "4"]
    code, out, _ = run(capsys, *argv, "--spec", "self:3")
    assert code == 0
    points = report.from_json(out).points
    assert [p.policy for p in points] == ["upfront", "bmc(8)"]

    code, _, err = run(capsys, *argv, "--spec", "bogus")
    assert code == 2 and "bogus" in err


LEDGER_COLUMNS = ("copy_elems", "append_elems", "sdpa_macs", "alloc_events")


def test_sweep_reps(capsys, monkeypatch):
    argv = ["sweep", "--seq-len", "32", "--steps", "4", "--cprime", "0.1"]
    argv += ["--policy", "bmc", "--allocs", "2,4"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    single = report.from_json(out).points

    walls = []
    real_generate = bench.generate

    def timed_generate(*args):
        result = real_generate(*args)
        walls.append(result.wall_s)
        return result

    monkeypatch.setattr(bench, "generate", timed_generate)
    code, out, _ = run(capsys, *argv, "--reps", "3")
    assert code == 0
    points = report.from_json(out).points
    assert len(walls) == 6

    # Same ledgers as a single repetition, median wall time
    for p, q in zip(points, single):
        assert [getattr(p, name) for name in LEDGER_COLUMNS] == [
            getattr(q, name) for name in LEDGER_COLUMNS
        ]
    assert points[0].wall_s == statistics.median(walls[:3])
    assert points[1].wall_s == statistics.median(walls[3:])


def test_sweep_reps_ledger_mismatch(capsys, monkeypatch):
    real_generate = bench.generate
    calls = []

    def drifting_generate(*args):
        result = real_generate(*args)
        calls.append(result)
        if len(calls) == 2:
            extra = pybmc.CostLedger(sdpa_macs=1)
            result.ledgers["attention"] = result.ledgers["attention"] + extra
        return result

    monkeypatch.setattr(bench, "generate", drifting_generate)
    argv = ["sweep", "--seq-len", "32", "--steps", "4", "--cprime", "0.1"]
    code, _, err = run(capsys, *argv, "--policy", "upfront", "--reps", "2")
    assert code == cli.EXIT_USAGE
    assert "differ between repetitions" in err


def test_generate(capsys, tmp_path):
    argv = ["generate", "--seq-len", "16", "--steps", "6", "--prompt-len", "2"]
    code, out, _ = run(capsys, *argv, "--policy", "bmc(4)")
    assert code == 0
    d = json.loads(out)
    assert d["policy"] == "bmc(4)"
    assert len(d["tokens"][0]) == 6

    path = str(tmp_path / "gen.json")
    code, out, _ = run(capsys, *argv, "--policy", "upfront", "--spec", "script:2", "--out", path)
    assert code == 0 and out == ""
    with open(path, encoding="utf-8") as f:
        assert json.load(f)["tokens"] == d["tokens"]

    code, _, _ = run(capsys, *argv, "--policy", "bmc(32)")
    assert code == 2
    code, _, _ = run(capsys, *argv, "--policy", "sometimes")
    assert code == 2
    code, _, _ = run(capsys, "generate", "--seq-len", "4", "--steps", "8")
    assert code == 2


def test_verbose_flag(capsys):
    code, _, _ = run(capsys, "-vv", "advise", "--n", "64", "--cprime", "0.5")
    assert code == 0


if __name__ == "__main__":
    run_tests(globals())
