"""コマンドラインのテスト"""

import json

import pandas as pd
import pytest

from conftest import REFERENCE_EXCESS_CRPS, REFERENCE_EXCESS_LOGLIK, REFERENCE_IFS, REFERENCE_P_VALUES
from densitybench.cli import build_parser, load_score_inputs, run_cli
from densitybench.utils.error_handler import DataValidationError


@pytest.fixture
def reference_files(tmp_path):
    p_path = tmp_path / "p_values.csv"
    pd.DataFrame([(m, *v) for m, v in REFERENCE_P_VALUES.items()],
                 columns=["model", "berkowitz", "jb", "ks"]).to_csv(p_path, index=False)
    ll_path = tmp_path / "loglik.csv"
    pd.DataFrame(list(REFERENCE_EXCESS_LOGLIK.items()), columns=["model", "loglik"]).to_csv(ll_path, index=False)
    crps_path = tmp_path / "crps.csv"
    pd.DataFrame(list(REFERENCE_EXCESS_CRPS.items()), columns=["model", "crps"]).to_csv(crps_path, index=False)
    return str(p_path), str(ll_path), str(crps_path)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("DENSITYBENCH_SEED", "DENSITYBENCH_ROSTER", "DENSITYBENCH_THREADS", "DENSITYBENCH_FUTURES"):
        monkeypatch.delenv(name, raising=False)


class TestScoreTables:
    """score-tables サブコマンド"""

    @pytest.mark.asyncio
    async def test_reproduces_reference_scores(self, reference_files, tmp_path, capsys):
        out = tmp_path / "ifs.csv"
        code = await run_cli(["score-tables", *reference_files, "--out", str(out)])
        assert code == 0
        table = pd.read_csv(out).set_index("model")
        for model, (total, cons, _, acc, _, err, _) in REFERENCE_IFS.items():
            assert table.loc[model, "ifs"] == pytest.approx(total, abs=0.002)
            assert table.loc[model, "consistency"] == pytest.approx(cons, abs=0.002)
            assert table.loc[model, "accuracy"] == pytest.approx(acc, abs=0.002)
            assert table.loc[model, "errors"] == pytest.approx(err, abs=0.002)
        assert table.index[0] == "VG"
        assert "VG" in capsys.readouterr().out

    def test_fraction_unit(self, reference_files):
        p_values, loglik, crps = load_score_inputs(*reference_files, p_unit="fraction")
        assert p_values["VG"] == pytest.approx((20.04, 50.0, 11.33))
        p_values, _, _ = load_score_inputs(*reference_files)
        assert p_values["VG"] == pytest.approx((0.2004, 0.5, 0.1133))
        assert loglik["VG"] == 31.28
        assert crps["VG"] == -0.286

    def test_non_numeric_values(self, tmp_path, reference_files):
        bad = tmp_path / "bad.csv"
        bad.write_text("model,loglik\nVG,abc\n", encoding="utf-8")
        with pytest.raises(DataValidationError, match="non-numeric"):
            load_score_inputs(reference_files[0], str(bad), reference_files[2])

    @pytest.mark.asyncio
    async def test_mismatched_models_exit_one(self, reference_files, tmp_path, capsys):
        short = tmp_path / "crps_short.csv"
        pd.DataFrame({"model": ["VG"], "crps": [-0.286]}).to_csv(short, index=False)
        code = await run_cli(["score-tables", reference_files[0], reference_files[1], str(short),
                              "--out", str(tmp_path / "ifs.csv")])
        assert code == 1
        assert "model names differ" in capsys.readouterr().out


class TestSynth:
    @pytest.mark.asyncio
    async def test_zero_cycles_is_usage_error(self, tmp_path, capsys):
        code = await run_cli(["synth", "--cycles", "0", "--out", str(tmp_path / "s")])
        assert code == 1
        assert "--cycles" in capsys.readouterr().out

    @pytest.mark.asyncio
    async def test_writes_dataset_and_manifest(self, tmp_path):
        out = tmp_path / "s"
        code = await run_cli(["synth", "--cycles", "2", "--seed", "4", "--out", str(out)])
        assert code == 0
        for name in ("futures.csv", "rates.csv", "options.csv", "truth.json", "manifest.json"):
            assert (out / name).is_file()
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "synth"
        assert manifest["master_seed"] == 4
        assert set(manifest["report_digests"]) == {"futures.csv", "rates.csv", "options.csv", "truth.json"}

        code = await run_cli(["validate-data", "--futures", str(out / "futures.csv"),
                              "--rates", str(out / "rates.csv"), "--options", str(out / "options.csv"),
                              "--output-dir", str(tmp_path / "v")])
        assert code == 0
        assert (tmp_path / "v" / "table1_moneyness.csv").is_file()


class TestBacktestCommand:
    @pytest.mark.asyncio
    async def test_invalid_configuration_exit_one(self, tmp_path, capsys):
        code = await run_cli(["backtest", "--futures", str(tmp_path / "missing.csv"), "--alpha", "2"])
        assert code == 1
        out = capsys.readouterr().out
        assert "alpha must lie in (0, 1)" in out
        assert "futures file not found" in out

    def test_parser_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    @pytest.mark.asyncio
    async def test_manifest_digest_ignores_threads_and_output(self, tmp_path):
        data = tmp_path / "s"
        assert await run_cli(["synth", "--cycles", "2", "--seed", "6", "--out", str(data)]) == 0
        common = ["backtest", "--futures", str(data / "futures.csv"), "--rates", str(data / "rates.csv"),
                  "--options", str(data / "options.csv"), "--roster", "LN-HIS(6m),LN-ATM",
                  "--n-paths", "10000", "--grid-points", "601", "--seed", "3", "--split-date", "none"]
        assert await run_cli([*common, "--threads", "1", "--output-dir", str(tmp_path / "one")]) == 0
        assert await run_cli([*common, "--threads", "2", "--output-dir", str(tmp_path / "two")]) == 0

        first = json.loads((tmp_path / "one" / "manifest.json").read_text(encoding="utf-8"))
        second = json.loads((tmp_path / "two" / "manifest.json").read_text(encoding="utf-8"))
        assert first["config_digest"] == second["config_digest"]
        assert first["run_digest"] == second["run_digest"]
        assert first["report_digests"]["scoreboard.json"] == second["report_digests"]["scoreboard.json"]
