import os
import json

from pybmc import report
from pybmc.report import SweepPoint, SweepReport, COLUMNS

from pytest import raises
from testutils import run_tests


def example_report():
    points = [
        SweepPoint("iterative", 512, 1, 0.1 + 0.2, 1310720, 4096, 9, 1024, 1 / 3, 2.5e-7),
        SweepPoint("bmc(64)", 8, 64, 1e-05, 0, 4096, 12, 16, 12345.678901234567, 0.0),
    ]
    config = {"dims": {"batch": 1, "max_context": 512}, "cprime": 0.1}
    return SweepReport(config, points)


def test_sweep_point():
    p = example_report().points[0]
    d = p.to_dict()
    assert tuple(d) == COLUMNS
    assert SweepPoint.from_dict(d) == p

    # Values as text convert per field
    text = {name: str(value) for name, value in d.items()}
    text["wall_s"] = repr(p.wall_s)
    assert SweepPoint.from_dict(text).T == 512
    assert SweepPoint.from_dict(text).wall_s == p.wall_s

    del d["r"]
    with raises(ValueError):
        SweepPoint.from_dict(d)


def test_json_exact():
    r = example_report()
    text = report.to_json(r)
    assert json.loads(text)["config"]["cprime"] == 0.1
    r2 = report.from_json(text)
    assert r2.points == r.points
    assert r2.config == r.config

    with raises(ValueError):
        report.from_json("[]")
    with raises(ValueError):
        report.from_json('{"config": {}}')


def test_csv_exact():
    r = example_report()
    text = report.to_csv(r)
    lines = text.splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert len(lines) == 3
    assert "0.30000000000000004" in lines[1]

    r2 = report.from_csv(text)
    assert r2.points == r.points
    assert r2.config == {}
    assert report.from_csv(text, r.config).config == r.config

    with raises(ValueError):
        report.from_csv("policy,T\nbmc,1\n")


def test_dumps_loads():
    r = example_report()
    for fmt in report.FORMATS:
        assert report.loads(report.dumps(r, fmt), fmt).points == r.points
    with raises(ValueError):
        report.dumps(r, "xml")
    with raises(ValueError):
        report.loads("", "xml")


def test_write_report(tmp_path):
    r = example_report()

    path = report.write_report(r, str(tmp_path / "sweep.csv"))
    with open(path, encoding="utf-8") as f:
        assert f.readline().startswith("policy,T,r")
    assert report.read_report(path).points == r.points

    path = str(tmp_path / "sweep.out")
    report.write_report(r, path)  # json by default
    assert report.read_report(path).config == r.config
    report.write_report(r, path, "csv")
    assert report.read_report(path, "csv").points == r.points

    # No temporary files are left behind
    assert sorted(os.listdir(tmp_path)) == ["sweep.csv", "sweep.out"]


def test_write_atomic_keeps_old_file_on_failure(tmp_path):
    path = str(tmp_path / "sweep.json")
    report.write_report(example_report(), path)
    with raises(ValueError):
        report.write_report(example_report(), path, "xml")
    assert len(report.read_report(path).points) == 2
    assert os.listdir(tmp_path) == ["sweep.json"]


if __name__ == "__main__":
    run_tests(globals())
