"""コマンドライン: synth / backtest / score-tables / validate-data"""

import argparse
import logging
import platform
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .backtest import BacktestData, load_backtest_data, run_backtest
from .utils.config import BacktestConfig, load_backtest_config
from .utils.error_handler import (
    ConfigError,
    DataValidationError,
    DensityBenchError,
    ErrorHandler,
    exit_code_for,
)
from .utils.evaluation import score_table
from .utils.marketdata import option_summary
from .utils.report_writer import ReportWriter, digest_object, file_digest, frame_to_csv
from .utils.synth import WORLDS, WorldParams, synth_generate

logger = logging.getLogger(__name__)

P_UNITS = ("percent", "fraction")


@dataclass
class RunManifest:
    """実行の再現情報"""
    command: str
    config_digest: str
    dataset_digests: Dict[str, str]
    version: str = __version__
    master_seed: Optional[int] = None
    started_at: str = ""
    finished_at: str = ""
    report_digests: Dict[str, str] = field(default_factory=dict)
    environment: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def start(cls, command: str, config: Mapping[str, Any], datasets: Mapping[str, Optional[str]],
              seed: Optional[int] = None) -> "RunManifest":
        digests = {name: file_digest(Path(path)) for name, path in sorted(datasets.items()) if path}
        return cls(
            command=command,
            config_digest=digest_object(dict(config)),
            dataset_digests=digests,
            master_seed=seed,
            started_at=_now(),
            environment={"python": platform.python_version(), "numpy": np.__version__,
                         "pandas": pd.__version__},
        )

    @property
    def run_digest(self) -> str:
        """タイムスタンプを除いた入力のダイジェスト"""
        return digest_object({"command": self.command, "config": self.config_digest,
                              "datasets": self.dataset_digests, "version": self.version,
                              "seed": self.master_seed})

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["run_digest"] = self.run_digest
        return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

async def cmd_synth(args: argparse.Namespace) -> int:
    """合成データセットを生成して CSV と truth.json を書き出す"""
    if args.cycles < 1:
        raise ConfigError("usage: --cycles must be >= 1", problems=[f"--cycles {args.cycles}"])
    overrides = {k: getattr(args, k) for k in ("sigma", "a", "vbar", "eta", "rho", "f0", "rate")
                 if getattr(args, k) is not None}
    world = WorldParams(world=args.world, **overrides)
    dataset = synth_generate(world, args.cycles, args.seed)

    writer = ReportWriter(args.out)
    manifest = RunManifest.start("synth", {"world": world.to_dict(), "cycles": args.cycles}, {}, args.seed)
    await writer.write_csv("futures.csv", dataset.futures_frame())
    await writer.write_csv("rates.csv", dataset.rates_frame())
    await writer.write_csv("options.csv", dataset.options_frame())
    await writer.write_json("truth.json", dataset.truth_document())
    manifest.finished_at = _now()
    manifest.report_digests = dict(writer.digests)
    await writer.write_json("manifest.json", manifest.to_dict())
    print(f"synthetic {args.world} dataset: {args.cycles} cycles written to {writer.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# backtest
# ---------------------------------------------------------------------------

_OVERRIDE_KEYS = ("futures", "rates", "options", "roster", "window_6m", "window_5y", "n_paths", "seed",
                  "grid_half_width", "grid_points", "alpha", "split_date", "output_dir", "holidays",
                  "sre_starts", "sre_maxiter", "garch_starts", "threads")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: getattr(args, k) for k in _OVERRIDE_KEYS if getattr(args, k, None) is not None}


async def write_backtest_reports(writer: ReportWriter, result, config: BacktestConfig,
                                 data: BacktestData, p_unit: str = "percent") -> None:
    """スコアボード・各表・PIT ヒストグラム・分位ファン・監査ログを書き出す"""
    board = result.scoreboard
    await writer.write_text("scoreboard.json", board.to_json())
    summary = option_summary(list(data.cross_sections.values()))
    await writer.write_csv("table1.csv", summary["moneyness"])
    await writer.write_csv("table2.csv", board.table2(p_unit))
    await writer.write_csv("table3.csv", board.table3())
    await writer.write_csv("table4.csv", board.table4())
    await writer.write_csv("table5.csv", board.table5())
    await writer.write_csv("table6.csv", board.table6())
    await writer.write_csv("pit_hist.csv", result.pit_histograms())
    await writer.write_csv("fan.csv", result.fans)
    await writer.write_jsonl("audit.jsonl", result.audit)
    await writer.write_json("skipped.json", result.skipped)


async def cmd_backtest(args: argparse.Namespace) -> int:
    """設定を検証しバックテストを実行してレポートを書き出す"""
    config = load_backtest_config(args.config, _overrides(args))
    data = load_backtest_data(config)
    manifest = RunManifest.start(
        "backtest", config.result_dict(),
        {"futures": config.futures, "rates": config.rates, "options": config.options}, config.seed,
    )
    handler = ErrorHandler()
    result = await run_backtest(config, data, handler)

    writer = ReportWriter(config.output_dir)
    await write_backtest_reports(writer, result, config, data, args.p_unit)
    manifest.finished_at = _now()
    manifest.report_digests = dict(writer.digests)
    await writer.write_json("manifest.json", manifest.to_dict())

    board = result.scoreboard
    if board.benchmark_fallback:
        print(f"note: benchmark missing from roster, excess figures relative to {board.benchmark}")
    print(frame_to_csv(board.table6()), end="")
    return 0


# ---------------------------------------------------------------------------
# score-tables
# ---------------------------------------------------------------------------

def _read_model_table(path: str, width: int, label: str) -> pd.DataFrame:
    """1 行 1 モデルの CSV（先頭列がモデル名、続く width 列が数値）"""
    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataValidationError(f"cannot read {label} file {path}: {e}", original_error=e)
    if frame.shape[1] < width + 1:
        raise DataValidationError(f"{label} file needs a model column and {width} value columns")
    frame = frame.iloc[:, : width + 1].copy()
    frame.iloc[:, 0] = frame.iloc[:, 0].astype(str).str.strip()
    values = frame.iloc[:, 1:].apply(pd.to_numeric, errors="coerce")
    if values.isna().any().any():
        raise DataValidationError(f"{label} file contains non-numeric values")
    if frame.iloc[:, 0].duplicated().any():
        raise DataValidationError(f"{label} file lists a model twice")
    frame.iloc[:, 1:] = values
    return frame


def load_score_inputs(p_values_path: str, loglik_path: str, crps_path: str,
                      p_unit: str = "percent"):
    """
    score-tables の 3 ファイルを読み込み

    Returns:
        (p 値の辞書（小数）, 対数尤度の辞書, CRPS の辞書)
    """
    scale = 0.01 if p_unit == "percent" else 1.0
    p_frame = _read_model_table(p_values_path, 3, "p-value")
    ll_frame = _read_model_table(loglik_path, 1, "log-likelihood")
    crps_frame = _read_model_table(crps_path, 1, "CRPS")
    p_values = {str(r[0]): tuple(float(v) * scale for v in r[1:4]) for r in p_frame.itertuples(index=False)}
    loglik = {str(r[0]): float(r[1]) for r in ll_frame.itertuples(index=False)}
    crps = {str(r[0]): float(r[1]) for r in crps_frame.itertuples(index=False)}
    return p_values, loglik, crps


async def cmd_score_tables(args: argparse.Namespace) -> int:
    """p 値・対数尤度・CRPS の表から正規化スコア・IFS・順位を計算"""
    p_values, loglik, crps = load_score_inputs(args.p_values, args.loglik, args.crps, args.p_unit)
    try:
        table = score_table(p_values, loglik, crps, alpha=args.alpha)
    except DensityBenchError as e:
        raise DataValidationError(e.message, original_error=e)
    out = Path(args.out)
    writer = ReportWriter(str(out.parent) if str(out.parent) else ".")
    await writer.write_csv(out.name, table)
    print(frame_to_csv(table.round(3)), end="")
    return 0


# ---------------------------------------------------------------------------
# validate-data
# ---------------------------------------------------------------------------

async def cmd_validate_data(args: argparse.Namespace) -> int:
    """入力データを検証し、オプション要約と除外された観測日を表示"""
    config = load_backtest_config(args.config, _overrides(args), require_data=True)
    data = load_backtest_data(config)
    summary = option_summary(list(data.cross_sections.values()))
    print(frame_to_csv(summary["types"]), end="")
    print(frame_to_csv(summary["moneyness"]), end="")
    for item in data.skipped_sections:
        print(f"skipped {item['obs_date']}: {item['reason']}")
    if args.output_dir:
        writer = ReportWriter(args.output_dir)
        await writer.write_csv("table1_types.csv", summary["types"])
        await writer.write_csv("table1_moneyness.csv", summary["moneyness"])
        await writer.write_json("skipped.json", data.skipped_sections)
    return 0


# ---------------------------------------------------------------------------
# パーサー
# ---------------------------------------------------------------------------

def _date(value: str) -> date:
    try:
        return date.fromisoformat(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {value!r}")


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value 形式の設定ファイル")
    parser.add_argument("--futures", help="先物 CSV (date,settle)")
    parser.add_argument("--rates", help="金利 CSV (date,rate)")
    parser.add_argument("--options", help="オプション CSV (obs_date,expiry,strike,kind,bid,ask)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densitybench", description="密度予測の較正・評価ツールキット")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="合成データセットを生成")
    synth.add_argument("--world", choices=WORLDS, default="lognormal")
    synth.add_argument("--cycles", type=int, default=60)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", default="synthetic")
    for name in ("sigma", "a", "vbar", "eta", "rho", "f0", "rate"):
        synth.add_argument(f"--{name}", type=float)
    synth.set_defaults(handler=cmd_synth)

    backtest = sub.add_parser("backtest", help="事前予測バックテストを実行")
    _add_data_flags(backtest)
    backtest.add_argument("--roster", help="カンマ区切りのスキーム名または all")
    backtest.add_argument("--window-6m", dest="window_6m", type=int)
    backtest.add_argument("--window-5y", dest="window_5y", type=int)
    backtest.add_argument("--n-paths", dest="n_paths", type=int)
    backtest.add_argument("--seed", type=int)
    backtest.add_argument("--grid-half-width", dest="grid_half_width", type=float)
    backtest.add_argument("--grid-points", dest="grid_points", type=int)
    backtest.add_argument("--alpha", type=float)
    backtest.add_argument("--split-date", dest="split_date")
    backtest.add_argument("--holidays", help="カンマ区切りの休日")
    backtest.add_argument("--sre-starts", dest="sre_starts", type=int)
    backtest.add_argument("--sre-maxiter", dest="sre_maxiter", type=int)
    backtest.add_argument("--garch-starts", dest="garch_starts", type=int)
    backtest.add_argument("--threads", type=int)
    backtest.add_argument("--output-dir", dest="output_dir")
    backtest.add_argument("--p-unit", dest="p_unit", choices=P_UNITS, default="percent")
    backtest.set_defaults(handler=cmd_backtest)

    scores = sub.add_parser("score-tables", help="p 値・対数尤度・CRPS の表から IFS を計算")
    scores.add_argument("p_values")
    scores.add_argument("loglik")
    scores.add_argument("crps")
    scores.add_argument("--alpha", type=float, default=0.05)
    scores.add_argument("--p-unit", dest="p_unit", choices=P_UNITS, default="percent")
    scores.add_argument("--out", default="ifs.csv")
    scores.set_defaults(handler=cmd_score_tables)

    validate = sub.add_parser("validate-data", help="入力データを検証")
    _add_data_flags(validate)
    validate.add_argument("--output-dir", dest="output_dir")
    validate.set_defaults(handler=cmd_validate_data)
    return parser


async def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    コマンドを実行して終了コードを返す

    Returns:
        0 成功、1 検証エラー、2 実行時エラー
    """
    args = build_parser().parse_args(argv)
    handler = ErrorHandler()
    try:
        return await args.handler(args)
    except ConfigError as e:
        handler.handle_error(e, {"command": args.command})
        print(f"error: {e.message}")
        for problem in e.problems:
            print(f"  - {problem}")
        return exit_code_for(e)
    except DensityBenchError as e:
        handler.handle_error(e, {"command": args.command})
        print(f"error: {e.message}")
        return exit_code_for(e)
    except Exception as e:
        handler.handle_error(e, {"command": args.command})
        print(f"error: {e}")
        return 2
