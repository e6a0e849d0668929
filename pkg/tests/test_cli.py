import csv
import io
import json
import math
import subprocess
import sys

import pytest

from oracles import bsc_capacity_closed_form
from spherepack.cli import UsageError, main, parse_grid

CHAIN = ["--n", "6", "--subblocks", "2", "--atoms", "8", "--messages", "2"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def fields(text: str) -> dict[str, list[str]]:
    rows = (line.split() for line in text.splitlines() if line.strip())
    return {r[0]: r[1:] for r in rows}


class TestParseGrid:
    def test_endpoints_included(self):
        assert parse_grid("0:0.7:0.01") == [round(0.01 * j, 12) for j in range(71)]

    def test_single_point(self):
        assert parse_grid("0.3:0.3:0.1") == [0.3]

    @pytest.mark.parametrize("text", ["0:1", "a:1:0.1", "0:1:0", "1:0:0.1", "0:1:-0.5"])
    def test_rejects(self, text):
        with pytest.raises(UsageError):
            parse_grid(text)


class TestCapacity:
    def test_bsc_half_order(self, capsys, channel_file):
        code, out, _ = run(capsys, "capacity", "--order", "0.5", channel_file)
        assert code == 0
        f = fields(out)
        assert float(f["capacity_nats"][0]) == pytest.approx(bsc_capacity_closed_form(0.5, 0.1), abs=1e-10)
        assert [float(v) for v in f["center"]] == pytest.approx([0.5, 0.5], abs=1e-10)
        assert f["converged"] == ["true"]

    def test_out_file(self, capsys, channel_file, tmp_path):
        target = tmp_path / "cap.txt"
        code, out, _ = run(capsys, "capacity", "--order", "1", "--out", target, channel_file)
        assert code == 0 and out == ""
        assert float(fields(target.read_text())["capacity_nats"][0]) == pytest.approx(
            bsc_capacity_closed_form(1.0, 0.1), abs=1e-10)

    @pytest.mark.parametrize("order", ["0", "1.5", "-0.2"])
    def test_order_out_of_range(self, capsys, channel_file, order):
        code, out, err = run(capsys, "capacity", "--order", order, channel_file)
        assert code == 2 and out == ""
        assert err.startswith("spb capacity:")

    def test_missing_order(self, capsys, channel_file):
        code, _, err = run(capsys, "capacity", channel_file)
        assert code == 2 and "--order" in err


class TestCenterCurve:
    def test_rows_and_uniform_center(self, capsys, channel_file):
        code, out, _ = run(capsys, "center-curve", "--order-grid", "0:1:0.25", channel_file)
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert [float(r["order"]) for r in rows] == [0.25, 0.5, 0.75, 1.0]
        for r in rows:
            assert float(r["capacity_nats"]) == pytest.approx(bsc_capacity_closed_form(float(r["order"]), 0.1), abs=1e-9)
            assert float(r["q0"]) == pytest.approx(0.5, abs=1e-9)

    def test_parallel_matches_serial(self, capsys, channel_file):
        grid = ["center-curve", "--order-grid", "0.05:1:0.05", channel_file]
        _, serial, _ = run(capsys, *grid)
        _, parallel, _ = run(capsys, *grid, "--jobs", "3")
        assert serial == parallel


class TestSpe:
    def test_grid_zero_beyond_capacity(self, capsys, channel_file):
        code, out, _ = run(capsys, "spe", "--rate-grid", "0:0.7:0.01", channel_file)
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert len(rows) == 71
        c1 = bsc_capacity_closed_form(1.0, 0.1)
        for r in rows:
            rate, value = float(r["rate"]), float(r["E_sp"])
            if rate >= c1:
                assert value == 0 and r["achieving_order"] == ""
            else:
                assert value > 0
        values = [float(r["E_sp"]) for r in rows]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_single_rate(self, capsys, channel_file):
        code, out, _ = run(capsys, "spe", "--rate", "0.2", channel_file)
        assert code == 0 and len(out.splitlines()) == 2

    def test_needs_a_rate(self, capsys, channel_file):
        code, _, err = run(capsys, "spe", channel_file)
        assert code == 2 and "--rate" in err

    def test_bad_grid(self, capsys, channel_file):
        code, _, err = run(capsys, "spe", "--rate-grid", "0:0.7", channel_file)
        assert code == 2 and "start:stop:step" in err

    def test_negative_rates(self, capsys, channel_file):
        code, _, _ = run(capsys, "spe", "--rate", "-0.1", channel_file)
        assert code == 2


class TestBound:
    def test_short_block_fails_window(self, capsys, channel_file):
        code, out, _ = run(capsys, "bound", "--n", "100", "--subblocks", "4", "--rate", "0.2", channel_file)
        assert code == 1
        f = fields(out)
        assert "hypothesis rate_at_least_rate0_plus_delta1 FAILED" in out
        assert float(f["delta1"][0]) > 0.2

    def test_huge_block_inside_window(self, capsys, channel_file):
        code, out, _ = run(capsys, "bound", "--n", 10**12, "--subblocks", 10**9, "--rate", "0.2", channel_file)
        assert code == 0
        assert out.count(" ok\n") == 2
        f = fields(out)
        assert f["vacuous"] == ["false"]
        assert float(f["log_bound"][0]) == pytest.approx(-1e12 * float(f["exponent"][0]), rel=1e-9)

    def test_rate_from_messages(self, capsys, channel_file):
        code, out, _ = run(capsys, "bound", "--n", "10", "--subblocks", "2", "--messages", "4", channel_file)
        assert code == 1
        assert float(fields(out)["rate"][0]) == pytest.approx(math.log(4) / 10)

    def test_needs_rate_or_messages(self, capsys, channel_file):
        code, _, err = run(capsys, "bound", "--n", "10", "--subblocks", "2", channel_file)
        assert code == 2 and "--rate" in err


class TestOptimalCode:
    def test_single_use(self, capsys, channel_file):
        code, out, err = run(capsys, "optimal-code", "--n", "1", "--messages", "2", channel_file)
        assert code == 0
        assert out.splitlines()[0].startswith("fenc 1 2 2 2")
        assert float(fields(err)["error_probability"][0]) == pytest.approx(0.1, abs=1e-12)

    def test_out_file_moves_summary_to_stdout(self, capsys, channel_file, tmp_path):
        target = tmp_path / "code.fenc"
        code, out, err = run(capsys, "optimal-code", "--n", "2", "--messages", "2", "--out", target, channel_file)
        assert code == 0 and err == ""
        assert target.read_text().startswith("fenc 2 2 2 2")
        assert float(fields(out)["error_probability"][0]) == pytest.approx(0.1, abs=1e-12)

    def test_budget_exhausted(self, capsys, channel_file):
        code, _, err = run(capsys, "optimal-code", "--n", "3", "--messages", "2", "--budget", "5", channel_file)
        assert code == 2 and err.startswith("spb optimal-code:")


class TestConstructionCommands:
    def test_construct_json(self, capsys, channel_file):
        code, out, _ = run(capsys, "construct", *CHAIN, channel_file)
        doc = json.loads(out)
        assert (doc["n"], doc["k"], doc["atoms"], doc["messages"]) == (6, 2, 8, 2)
        assert doc["mass"]["p"] == pytest.approx(1.0, abs=1e-9)
        assert code == (0 if all(doc["hypotheses"].values()) else 1)

    def test_verify_chain_reports_failed_window(self, capsys, channel_file):
        code, out, _ = run(capsys, "verify-chain", *CHAIN, channel_file)
        report = json.loads(out)
        assert code == 1 and report["all_pass"] is False
        status = {c["id"]: c["status"] for c in report["checks"]}
        assert status["final-bound"] == "hypothesis-failed"
        assert status["g-range"] == "pass"

    def test_byte_identical_reruns(self, capsys, channel_file, tmp_path):
        paths = [tmp_path / f"r{j}.json" for j in range(2)]
        for p in paths:
            run(capsys, "verify-chain", *CHAIN, "--out", p, channel_file)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_missing_flags(self, capsys, channel_file):
        code, _, err = run(capsys, "construct", "--n", "6", channel_file)
        assert code == 2
        assert "--subblocks" in err and "--atoms" in err and "--messages" in err


class TestDiagnostics:
    def test_malformed_entry(self, capsys, tmp_path):
        bad = tmp_path / "bad.dmc"
        bad.write_text("dmc 2 2\n0.9 0.1\n0.1 x\n", encoding="utf-8")
        code, out, err = run(capsys, "capacity", "--order", "0.5", bad)
        assert code == 2 and out == ""
        assert err.startswith(f"{bad}: line 3, column 5")

    def test_rows_not_summing_to_one(self, capsys, tmp_path):
        path = tmp_path / "off.dmc"
        path.write_text("dmc 2 2\n0.9 0.1\n0.1 0.8\n", encoding="utf-8")
        code, _, err = run(capsys, "capacity", "--order", "0.5", path)
        assert code == 2 and "line 3" in err

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "capacity", "--order", "0.5", tmp_path / "none.dmc")
        assert code == 2 and err.startswith("spb:")

    def test_unknown_command(self, capsys, channel_file):
        code, _, _ = run(capsys, "bogus", channel_file)
        assert code == 2

    def test_help(self, capsys):
        code, out, _ = run(capsys, "--help")
        assert code == 0 and "verify-chain" in out

    @pytest.mark.parametrize("flag", [["--tol", "0"], ["--jobs", "0"]])
    def test_bad_numeric_flags(self, capsys, channel_file, flag):
        code, _, _ = run(capsys, "capacity", "--order", "0.5", *flag, channel_file)
        assert code == 2


def test_module_entry_point(channel_file):
    proc = subprocess.run([sys.executable, "-m", "spherepack.cli", "capacity", "--order", "0.5", str(channel_file)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert fields(proc.stdout)["converged"] == ["true"]
