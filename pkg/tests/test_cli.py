import subprocess
import sys

from divbar_sim.cli import main, read_sweep_csv


def run_cli(args):
    return main(list(args))


class TestSimulate:
    def test_missing_file_exit_2(self, capsys, tmp_path):
        code = run_cli(["simulate", str(tmp_path / "nope.json")])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err

    def test_metrics_row_count(self, twonode_path, tmp_path):
        out = tmp_path / "metrics.csv"
        code = run_cli(
            ["simulate", twonode_path, "--slots", "1000", "--seed", "5",
             "--out", str(out)]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# divbar-sim v1"
        assert lines[1].startswith("slot,occupancy_total")
        assert len(lines) == 1002  # version, header, 1000 slot rows

    def test_byte_identical_replay(self, twonode_path, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run_cli(
                ["simulate", twonode_path, "--slots", "800", "--seed", "9",
                 "--policy", "mia", "--out", str(out)]
            ) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_trace_written(self, twonode_path, tmp_path):
        out = tmp_path / "m.csv"
        trace = tmp_path / "t.csv"
        assert run_cli(
            ["simulate", twonode_path, "--slots", "50", "--out", str(out),
             "--trace", str(trace)]
        ) == 0
        lines = trace.read_text().splitlines()
        assert lines[1] == "slot,node,event,commodity,packet,detail"
        assert any(",arrive," in ln for ln in lines)


class TestSweep:
    def test_grid_row_count_and_roundtrip(self, twonode_path, tmp_path):
        out = tmp_path / "sweep.csv"
        code = run_cli(
            ["sweep", twonode_path, "--policies", "rep,rmia,mia",
             "--multipliers", "0.5,1.0", "--replicas", "2",
             "--slots", "2000", "--workers", "1", "--out", str(out)]
        )
        assert code == 0
        header, rows = read_sweep_csv(str(out))
        assert len(rows) == 3 * 2 * 2
        assert header[:4] == [
            "policy", "rate_multiplier", "lambda_effective", "time_avg_occupancy"
        ]
        assert {r["policy"] for r in rows} == {"rep", "rmia", "mia"}

    def test_empty_policy_list_exit_2(self, twonode_path, tmp_path, capsys):
        code = run_cli(
            ["sweep", twonode_path, "--policies", ",", "--out",
             str(tmp_path / "s.csv")]
        )
        assert code == 2

    def test_unknown_policy_exit_2(self, twonode_path, tmp_path):
        code = run_cli(
            ["sweep", twonode_path, "--policies", "flood", "--out",
             str(tmp_path / "s.csv")]
        )
        assert code == 2

    def test_bisect_prints_summary(self, twonode_path, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        code = run_cli(
            ["sweep", twonode_path, "--policies", "rmia", "--bisect",
             "--iterations", "3", "--replicas", "1", "--slots", "11000",
             "--workers", "1", "--out", str(out)]
        )
        assert code == 0
        captured = capsys.readouterr().out
        assert "max stable multiplier" in captured
        _, rows = read_sweep_csv(str(out))
        assert len(rows) == 3


class TestVerify:
    def test_unknown_suite_exit_2(self, twonode_path):
        assert run_cli(["verify", twonode_path, "--suite", "bogus"]) == 2

    def test_lemma1_skips_discrete(self, twonode_path, capsys):
        assert run_cli(["verify", twonode_path, "--suite", "lemma1"]) == 0
        assert "skipped: discrete channel" in capsys.readouterr().out

    def test_lemma1_passes_on_rayleigh(self, default10_path, capsys):
        assert run_cli(["verify", default10_path, "--suite", "lemma1"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out

    def test_coupling_suite(self, twonode_path, capsys):
        assert run_cli(["verify", twonode_path, "--suite", "coupling"]) == 0
        out = capsys.readouterr().out
        assert "replay determinism" in out

    def test_epochlen_suite_small(self, twonode_path, capsys):
        assert run_cli(
            ["verify", twonode_path, "--suite", "epochlen", "--epochs", "20000"]
        ) == 0

    def test_phi_suite(self, twonode_path):
        assert run_cli(["verify", twonode_path, "--suite", "phi"]) == 0


class TestTable:
    def test_dump(self, default10_path, tmp_path):
        out = tmp_path / "table.csv"
        code = run_cli(
            ["table", default10_path, "--link", "0,2", "--max-order", "4",
             "--out", str(out)]
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[1] == "x,m0,m1,m2,m3,m4"
        assert len(lines) == 2 + 1025

    def test_unknown_link_exit_2(self, default10_path, tmp_path):
        code = run_cli(
            ["table", default10_path, "--link", "0,9", "--out",
             str(tmp_path / "t.csv")]
        )
        assert code == 2


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "divbar_sim.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "simulate" in proc.stdout
