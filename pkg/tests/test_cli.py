import json
import subprocess
import sys

import pytest

from prefdesign.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main, read_config_file, resolve
from prefdesign.harness import ConfigError, make_replay_style, write_replay_csv


def _opts(argv):
    parser = build_parser()
    return resolve(parser.parse_args(argv), parser)


class TestConfigPrecedence:
    def test_defaults(self):
        opts = _opts(["simulate"])
        assert opts["budget"] == 1500 and opts["delta"] == 0.1
        assert _opts(["canonical"])["d"] == 10

    def test_file_then_flag(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("# comment\nbudget = 300\nbatch-size=25  # inline\ndelta = 0.05\n")
        opts = _opts(["simulate", "--config", str(cfg), "--delta", "0.2"])
        assert opts["budget"] == 300 and opts["batch_size"] == 25
        assert opts["delta"] == 0.2

    def test_unknown_key_and_bad_value(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("path = x.csv\n")
        with pytest.raises(ConfigError):
            _opts(["simulate", "--config", str(cfg)])
        cfg.write_text("budget = lots\n")
        with pytest.raises(ConfigError):
            _opts(["simulate", "--config", str(cfg)])
        cfg.write_text("budget 300\n")
        with pytest.raises(ConfigError, match=":1:"):
            read_config_file(cfg)


class TestExitCodes:
    def test_bad_flag(self, capsys):
        assert main(["simulate", "--budget", "many"]) == EXIT_CONFIG
        assert main(["nonsense"]) == EXIT_CONFIG
        assert main(["simulate", "--strategies", "bogus"]) == EXIT_CONFIG

    def test_missing_config_file(self):
        assert main(["simulate", "--config", "/nonexistent/c.cfg"]) == EXIT_CONFIG

    def test_bad_data(self, tmp_path, capsys):
        p = tmp_path / "r.csv"
        p.write_text("pair_id,label,f_0\na,1,0.5\nb,7,1.0\n")
        assert main(["replay", "--path", str(p)]) == EXIT_DATA
        assert ":3:" in capsys.readouterr().err

    def test_replay_needs_path(self):
        assert main(["replay"]) == EXIT_CONFIG

    def test_simulate_writes_outputs(self, tmp_path, capsys):
        out = tmp_path / "sim"
        code = main(["simulate", "--d", "3", "--n", "15", "--budget", "20", "--batch-size", "10",
                     "--n-seeds", "2", "--strategies", "random", "--output", str(out)])
        assert code == EXIT_OK
        assert (tmp_path / "sim.trace.csv").exists() and (tmp_path / "sim.summary.csv").exists()
        assert capsys.readouterr().out.startswith("strategy,budget,mean_accuracy")

    def test_replay_runs(self, tmp_path, capsys):
        z, y = make_replay_style(3, 60, seed=0)
        write_replay_csv(tmp_path / "r.csv", z, y)
        code = main(["replay", "--path", str(tmp_path / "r.csv"), "--budget", "20", "--batch-size", "10",
                     "--n-seeds", "1", "--strategies", "ours-greedy"])
        assert code == EXIT_OK

    def test_json_commands(self, capsys):
        assert main(["design", "--d", "2", "--eps", "0.2"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert abs(sum(out["weights"]) - 1) < 1e-9
        assert main(["lowerbound", "--d", "2", "--eps", "0.2", "--delta", "0.05"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["value"] > 0
        assert main(["complexity", "--d", "2", "--eps", "0.2"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["ell_star"] == 5


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "prefdesign.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
