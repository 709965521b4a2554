import json
import logging

import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from config.settings import Config
from src.cli import app
from tests.conftest import small_raw

runner = CliRunner()


@pytest.fixture(autouse=True)
def _drop_cli_log_handlers():
    # each invocation installs handlers bound to the runner's captured streams
    root = logging.getLogger()
    before = list(root.handlers)
    yield
    for handler in root.handlers[:]:
        if handler not in before:
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(small_raw()))
    return path


def invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


class TestRun:

    def test_single_seed(self, config_file, tmp_path):
        result = invoke("run", "--config", config_file, "--out-dir", tmp_path / "out")
        assert result.exit_code == 0, result.output
        run_dir = tmp_path / "out" / "ppdl" / "seed-3"
        assert (run_dir / "rounds.csv").is_file()
        assert (run_dir / "manifest.json").is_file()
        assert not (run_dir / "audit.jsonl").exists()

    def test_seed_sweep(self, config_file, tmp_path):
        result = invoke("run", "--config", config_file, "--seeds", "0,1", "--method", "local", "--out-dir", tmp_path)
        assert result.exit_code == 0, result.output
        assert (tmp_path / "local" / "seed-0" / "summary.json").is_file()
        assert (tmp_path / "local" / "seed-1" / "summary.json").is_file()
        sweep = json.loads((tmp_path / "local" / "sweep.json").read_text())
        assert sweep["seeds"] == [0, 1]

    def test_audit_log(self, config_file, tmp_path):
        result = invoke("run", "--config", config_file, "--audit", "--out-dir", tmp_path)
        assert result.exit_code == 0, result.output
        assert (tmp_path / "ppdl" / "seed-3" / "audit.jsonl").stat().st_size > 0

    def test_default_output_dir(self, config_file):
        result = invoke("run", "--config", config_file, "--method", "local")
        assert result.exit_code == 0, result.output
        assert (Config.OUTPUT_DIR / "local" / "seed-3" / "accuracy.csv").is_file()

    def test_invalid_config_exits_2(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(small_raw(colour="red")))
        assert invoke("run", "--config", path, "--out-dir", tmp_path).exit_code == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert invoke("run", "--config", tmp_path / "nope.yaml").exit_code == 2

    def test_bad_seed_list_exits_2(self, config_file, tmp_path):
        assert invoke("run", "--config", config_file, "--seeds", "a,b", "--out-dir", tmp_path).exit_code == 2

    def test_unwritable_output_exits_1(self, config_file, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert invoke("run", "--config", config_file, "--out-dir", blocker).exit_code == 1

    def test_process_settings_are_validated(self, config_file, monkeypatch):
        monkeypatch.setattr(Config, "MAX_ARMS", 0)
        assert invoke("run", "--config", config_file).exit_code == 2


class TestCompareAndTraces:

    @pytest.fixture
    def runs(self, config_file, tmp_path):
        for method in ("ppdl", "local"):
            result = invoke("run", "--config", config_file, "--method", method, "--out-dir", tmp_path / "runs")
            assert result.exit_code == 0, result.output
        return tmp_path / "runs"

    def test_compare_writes_table(self, runs, tmp_path):
        out = tmp_path / "table.csv"
        result = invoke(
            "compare", runs / "ppdl" / "seed-3", runs / "local" / "seed-3", "--baseline", "local", "--output", out,
        )
        assert result.exit_code == 0, result.output
        table = pd.read_csv(out, index_col="method")
        assert set(table.index) == {"ppdl", "local"}
        assert table.loc["local", "delta_mean"] == 0.0

    def test_compare_missing_run(self, tmp_path):
        assert invoke("compare", tmp_path / "nothing").exit_code == 2

    def test_traces(self, runs, tmp_path):
        out = tmp_path / "traces.csv"
        result = invoke("traces", runs / "ppdl" / "seed-3", "--nodes", "0,3", "--last", "3", "--output", out)
        assert result.exit_code == 0, result.output
        assert "intra-cluster fraction" in result.output
        table = pd.read_csv(out, index_col="t")
        assert list(table.columns) == ["0", "3"]
        assert len(table) == 6

    def test_traces_missing_run(self, tmp_path):
        assert invoke("traces", tmp_path).exit_code == 2
