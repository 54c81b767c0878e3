import csv
import io
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from dirfmm.cli import main
from dirfmm.report import RunReport, deterministic_view, validate_report


@pytest.fixture(scope="module")
def cache_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cache") / "k4.bin"
    assert main(["precompute", "--K", "4", "--epsilon", "1e-4", "--out", str(path)]) == 0
    return path


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_info_reports_occupancy(capsys):
    assert main(["info", "--K", "16", "--ppw", "2"]) == 0
    out = _json_out(capsys)
    assert out["total_partition_boxes"] == 64
    assert out["nonempty_partition_boxes"] == 56
    assert out["partition_width"] == 4.0


def test_run_report_and_validate(tmp_path, cache_file, capsys):
    report = tmp_path / "run.json"
    args = ["run", "--K", "4", "--ppw", "3", "--cache", str(cache_file), "--report", str(report)]
    assert main(args + ["--validate", "100"]) == 0
    d = json.loads(report.read_text())
    validate_report(d)
    assert d["relative_error"] <= 1e-2 and d["validation"]["sample_size"] == 100
    assert (tmp_path / d["potentials_file"]).is_file()
    capsys.readouterr()
    assert main(["validate", "--run-report", str(report), "--sample", "50"]) == 0
    assert _json_out(capsys)["error"] <= 1e-2

    par = tmp_path / "par.json"
    dump = tmp_path / "part.json"
    assert main(["run", "--K", "4", "--ppw", "3", "--cache", str(cache_file), "--p", "4",
                 "--mode", "threads", "--report", str(par), "--partition-dump", str(dump)]) == 0
    dp = json.loads(par.read_text())
    assert dp["checksum"]["l2_norm"] == pytest.approx(d["checksum"]["l2_norm"], rel=1e-10)
    u_seq = np.load(tmp_path / d["potentials_file"])
    u_par = np.load(tmp_path / dp["potentials_file"])
    assert np.max(np.abs(u_seq - u_par)) <= 1e-10 * np.max(np.abs(u_seq))
    assert json.loads(dump.read_text())["p"] == 4


def test_bench_csv(tmp_path, cache_file):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--K", "4", "--ppw", "2", "--cache", str(cache_file), "--p-list", "1,2",
                 "--repeats", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["p"] for r in rows] == ["1", "2"]
    assert set(rows[0]) == {"p", "repeat", "lf_m2m", "hf_m2m", "hf_m2l_l2l", "lf_m2l_l2l",
                            "comm", "total", "efficiency"}
    assert float(rows[0]["efficiency"]) == pytest.approx(1.0)


@pytest.mark.parametrize("argv, code, text", [
    (["run", "--K", "4", "--ppw", "2", "--p", "100", "--mode", "threads"], 2, "non-empty partition-level boxes"),
    (["run", "--K", "5", "--ppw", "2"], 2, "power of 4"),
    (["run", "--K", "4", "--cache", "/nonexistent/c.bin"], 2, "not found"),
    (["run", "--K", "4", "--geometry", "cube"], 2, "geometry"),
    (["validate", "--run-report", "/nonexistent.json"], 2, "not found"),
])
def test_errors_are_json_with_exit_codes(argv, code, text, capsys):
    assert main(argv) == code
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == code and text in err["message"]


def test_corrupt_cache(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a cache at all")
    assert main(["run", "--K", "4", "--ppw", "2", "--cache", str(bad)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "CacheFormatError"


def test_report_schema(store):
    d = store.run(4)["report"].to_dict()
    validate_report(d)
    assert RunReport.from_dict(d).to_dict() == d
    assert "timing" not in deterministic_view(d) and "timing" in d
    broken = dict(d)
    del broken["checksum"]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(broken)


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "dirfmm.cli", "info", "--K", "4", "--ppw", "1"],
                         capture_output=True, text=True, check=True)
    assert json.loads(out.stdout)["total_partition_boxes"] == 8
