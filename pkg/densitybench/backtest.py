"""事前予測バックテストの実行（スケジュール構築・並列キャリブレーション・評価）"""

import asyncio
import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .schemes import BENCHMARK, SCHEMES, SchemeInputs, run_scheme
from .utils.config import BacktestConfig
from .utils.density import FAN_QUANTILES, make_grid
from .utils.error_handler import (
    DensityBenchError,
    ErrorCategory,
    ErrorHandler,
    ErrorSeverity,
    InsufficientQuotesError,
    ScheduleError,
    handle_errors,
)
from .utils.evaluation import (
    ForecastOutcome,
    ScoreBoard,
    build_scoreboard,
    crps_rb,
    log_density,
    pit,
    pit_histogram,
)
from .utils.marketdata import (
    CrossSection,
    PriceHistory,
    attach_rates,
    filter_cross_section,
    load_futures_history,
    load_option_quotes,
    load_rates,
    option_time,
    third_friday_expiries,
)

logger = logging.getLogger(__name__)

OBS_OFFSET_DAYS = 28


@dataclass(frozen=True)
class Cycle:
    """1 回の予測サイクル（観測日から満期まで）"""
    obs_date: date
    expiry: date
    tau_business: int
    f_t: float
    realization: float
    tau_calendar: int = OBS_OFFSET_DAYS
    cross_section: Optional[CrossSection] = None


@dataclass
class BacktestData:
    """バックテスト入力一式"""
    history: PriceHistory
    expiries: List[date]
    cross_sections: Dict[date, CrossSection] = field(default_factory=dict)
    skipped_sections: List[Dict[str, Any]] = field(default_factory=list)

    @classmethod
    def from_synthetic(cls, dataset) -> "BacktestData":
        return cls(history=dataset.history, expiries=dataset.expiries,
                   cross_sections={cs.obs_date: cs for cs in dataset.cross_sections})


@dataclass
class BacktestResult:
    """バックテスト結果"""
    scoreboard: ScoreBoard
    cycles: List[Cycle]
    audit: List[Dict[str, Any]]
    fans: pd.DataFrame
    pits: Dict[str, List[float]]
    exclusions: Dict[str, int]
    skipped: List[Dict[str, Any]]
    error_stats: Dict[str, Any]

    def pit_histograms(self, bins: int = 20) -> pd.DataFrame:
        """モデル別 PIT ヒストグラム（縦持ち）"""
        frames = []
        for model, values in self.pits.items():
            frame = pit_histogram(values, bins)
            frame.insert(0, "model", model)
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=["model", "bin_lower", "bin_upper", "count", "expected"])
        return pd.concat(frames, ignore_index=True)


# ---------------------------------------------------------------------------
# データ読み込み・スケジュール
# ---------------------------------------------------------------------------

def load_backtest_data(config: BacktestConfig) -> BacktestData:
    """
    設定のファイルから先物・金利・オプションを読み込みクロスセクションを構築

    Args:
        config: 検証済み設定

    Returns:
        BacktestData（フィルタで除外された観測日は skipped_sections に記録）
    """
    history = load_futures_history(config.futures)
    if config.rates:
        history = attach_rates(history, load_rates(config.rates))

    sections: Dict[date, CrossSection] = {}
    skipped: List[Dict[str, Any]] = []
    if config.options:
        quotes = load_option_quotes(config.options)
        expiries = sorted({expiry for _, expiry in quotes})
        for (obs, expiry), raw in sorted(quotes.items()):
            if not history.has_date(obs):
                skipped.append({"obs_date": obs.isoformat(), "reason": "no futures price"})
                continue
            rate = history.rate_on(obs)
            tau, r_eff = option_time(obs, expiry, rate)
            try:
                sections[obs] = filter_cross_section(raw, history.price_on(obs), r_eff, tau,
                                                     obs_date=obs, expiry=expiry, rate=rate)
            except InsufficientQuotesError as e:
                logger.warning(f"Cross-section {obs} skipped: {e.message}")
                skipped.append({"obs_date": obs.isoformat(), "reason": e.message})
    else:
        first = history.dates[0].astype(object)
        last = history.dates[-1].astype(object)
        expiries = third_friday_expiries(first, last)

    logger.info(f"Backtest data: {len(history)} futures rows, {len(expiries)} expiries, "
                f"{len(sections)} usable cross-sections, {len(skipped)} skipped")
    return BacktestData(history=history, expiries=expiries, cross_sections=sections, skipped_sections=skipped)


def business_days(start: date, end: date, holidays: Sequence[date] = ()) -> int:
    """[start, end) の営業日数（週末と休日を除く）"""
    return int(np.busday_count(np.datetime64(start, "D"), np.datetime64(end, "D"),
                               holidays=[np.datetime64(h, "D") for h in holidays]))


def build_schedule(
    expiries: Sequence[date],
    history: PriceHistory,
    *,
    cross_sections: Optional[Mapping[date, CrossSection]] = None,
    holidays: Sequence[date] = ()
) -> Tuple[List[Cycle], List[Dict[str, Any]]]:
    """
    満期日の 28 日前を観測日とする月次サイクルを構築

    満期の清算値がないサイクルは除外し、クロスセクションのないサイクルは
    ヒストリカルモデル専用として残す（いずれも診断情報に記録）。

    Args:
        expiries: 昇順の満期日
        history: 先物履歴
        cross_sections: 観測日 -> クロスセクション
        holidays: 休日リスト

    Returns:
        (サイクル一覧, 除外・制限の診断情報)

    Raises:
        ScheduleError: 観測日の先物価格がない、満期日が昇順でない、サイクルが重複
    """
    cross_sections = cross_sections or {}
    expiries = list(expiries)
    if any(b <= a for a, b in zip(expiries, expiries[1:])):
        raise ScheduleError("expiries must be strictly increasing")

    cycles: List[Cycle] = []
    diagnostics: List[Dict[str, Any]] = []
    last_date = history.dates[-1].astype(object)
    for expiry in expiries:
        obs = expiry - timedelta(days=OBS_OFFSET_DAYS)
        if expiry > last_date:
            diagnostics.append({"obs_date": obs.isoformat(), "reason": "no realization yet"})
            continue
        if not history.has_date(obs):
            raise ScheduleError(f"no futures price on observation date {obs} (expiry {expiry})",
                                context={"obs_date": str(obs)})
        if not history.has_date(expiry):
            diagnostics.append({"obs_date": obs.isoformat(), "reason": f"no settlement on expiry {expiry}"})
            logger.warning(f"Cycle {obs} dropped: no settlement price on expiry {expiry}")
            continue
        if cycles and obs < cycles[-1].expiry:
            raise ScheduleError(f"cycle {obs} overlaps the previous cycle ending {cycles[-1].expiry}")
        section = cross_sections.get(obs)
        if section is None:
            diagnostics.append({"obs_date": obs.isoformat(), "reason": "no option cross-section"})
            logger.info(f"Cycle {obs}: no option cross-section, historical schemes only")
        cycles.append(Cycle(
            obs_date=obs,
            expiry=expiry,
            tau_business=business_days(obs, expiry, holidays),
            f_t=history.price_on(obs),
            realization=history.price_on(expiry),
            cross_section=section,
        ))
    logger.info(f"Schedule built: {len(cycles)} cycles ({len(diagnostics)} diagnostics)")
    return cycles, diagnostics


def check_windows(cycles: Sequence[Cycle], history: PriceHistory, roster: Sequence[str],
                  windows: Mapping[str, int]) -> None:
    """
    すべてのサイクルで推定ウィンドウが履歴に収まるか事前に確認

    Raises:
        ScheduleError: 最初に収まらないサイクルを示す
    """
    labels = {SCHEMES[m].window_label for m in roster if SCHEMES[m].window_label}
    for cycle in cycles:
        available = history.index_on(cycle.obs_date)
        for label in sorted(labels, key=lambda lb: windows[lb]):
            if available < windows[label]:
                raise ScheduleError(
                    f"window {label} ({windows[label]} returns) does not fit before cycle {cycle.obs_date}: "
                    f"only {available} returns available",
                    context={"obs_date": str(cycle.obs_date), "window": label}
                )


def history_until(history: PriceHistory, day: date) -> PriceHistory:
    """観測日までで切り詰めた履歴"""
    end = history.index_on(day) + 1
    rates = history.rates[:end] if history.rates is not None else None
    truncated = replace(history, dates=history.dates[:end], settles=history.settles[:end], rates=rates)
    assert truncated.dates[-1].astype(object) <= day
    return truncated


def derive_seed(master_seed: int, model: str, obs_date: date) -> np.random.SeedSequence:
    """(マスターシード, モデル, 観測日) から決定論的に乱数系列を導出"""
    key = f"{master_seed}:{model}:{obs_date.isoformat()}".encode("utf-8")
    entropy = int.from_bytes(hashlib.sha256(key).digest()[:16], "big")
    return np.random.SeedSequence(entropy)


# ---------------------------------------------------------------------------
# ワーカー
# ---------------------------------------------------------------------------

@dataclass
class _TaskResult:
    model: str
    cycle: Cycle
    outcome: Optional[ForecastOutcome]
    audit: Dict[str, Any]
    fan: Optional[Dict[str, Any]] = None
    error: Optional[Exception] = None


def _clean(value: Any) -> Any:
    """監査ログ用に numpy 値や非有限値を整形"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return round(v, 12) if math.isfinite(v) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, date):
        return value.isoformat()
    return value


@handle_errors(severity=ErrorSeverity.HIGH, category=ErrorCategory.CALIBRATION)
def _forecast(model: str, cycle: Cycle, history: PriceHistory, config: BacktestConfig,
              grid: np.ndarray, seed: np.random.SeedSequence):
    spec = SCHEMES[model]
    if spec.needs_options and cycle.cross_section is None:
        raise InsufficientQuotesError(f"no option cross-section on {cycle.obs_date}")
    if cycle.cross_section is not None:
        assert cycle.cross_section.obs_date is None or cycle.cross_section.obs_date <= cycle.obs_date
    inputs = SchemeInputs(
        obs_date=cycle.obs_date,
        expiry=cycle.expiry,
        f_t=cycle.f_t,
        tau_business=cycle.tau_business,
        history=history,
        cross_section=cycle.cross_section,
        windows=config.windows,
        n_paths=config.n_paths,
        grid=grid,
        sre_starts=config.sre_starts,
        sre_maxiter=config.sre_maxiter,
        garch_starts=config.garch_starts,
    )
    return run_scheme(spec, inputs, seed)


def _run_task(model: str, cycle: Cycle, history: PriceHistory, config: BacktestConfig,
              grid: np.ndarray) -> _TaskResult:
    """1 モデル・1 サイクルの予測と評価（ワーカースレッドで実行）"""
    seed = derive_seed(config.seed, model, cycle.obs_date)
    audit: Dict[str, Any] = {
        "obs_date": cycle.obs_date.isoformat(),
        "expiry": cycle.expiry.isoformat(),
        "model": model,
        "seed_entropy": str(seed.entropy),
        "f_t": cycle.f_t,
        "tau_business": cycle.tau_business,
    }
    started = time.perf_counter()
    try:
        density, details = _forecast(model, cycle, history, config, grid, seed)
    except DensityBenchError as e:
        audit.update({"status": "excluded", "error": e.message, "category": e.category.value})
        return _TaskResult(model, cycle, None, audit, error=e)

    problems = density.check_invariants()
    if problems:
        logger.warning(f"{model} {cycle.obs_date}: density invariants violated: {problems}")
    outcome = ForecastOutcome(
        model=model,
        obs_date=cycle.obs_date,
        pit=pit(density, cycle.realization),
        log_density=log_density(density, cycle.realization),
        crps=crps_rb(density, cycle.realization),
    )
    audit.update({
        "status": "ok",
        "calibration": _clean(details),
        "diagnostics": _clean(density.diagnostics),
        "density": _clean(density.summary()),
        "invariant_problems": problems,
        "pit": outcome.pit,
        "log_density": outcome.log_density,
        "crps": outcome.crps,
    })
    fan = {"obs_date": cycle.obs_date.isoformat(), "expiry": cycle.expiry.isoformat(), "model": model,
           "f_t": cycle.f_t, "realization": cycle.realization, **density.quantiles(FAN_QUANTILES)}
    logger.debug(f"{model} {cycle.obs_date}: pit={outcome.pit:.4f} "
                 f"({time.perf_counter() - started:.2f}s)")
    return _TaskResult(model, cycle, outcome, _clean(audit), fan=fan)


# ---------------------------------------------------------------------------
# 実行
# ---------------------------------------------------------------------------

async def run_backtest(config: BacktestConfig, data: BacktestData,
                       error_handler: Optional[ErrorHandler] = None) -> BacktestResult:
    """
    全サイクル × 全モデルの予測を並列実行し ScoreBoard を作成

    タスクは asyncio.Queue に積まれ、ワーカーがスレッドプールで計算する。
    集計は完了順によらず観測日・モデル順で行う。

    Args:
        config: 検証済み設定
        data: 入力データ
        error_handler: エラーハンドラー（省略時は新規作成）

    Returns:
        BacktestResult

    Raises:
        ScheduleError: スケジュールまたはウィンドウが不正
    """
    handler = error_handler or ErrorHandler()
    roster = list(config.roster)
    cycles, skipped = build_schedule(data.expiries, data.history,
                                     cross_sections=data.cross_sections, holidays=config.holidays)
    if not cycles:
        raise ScheduleError("no forecast cycles could be scheduled")
    check_windows(cycles, data.history, roster, config.windows)
    grid = make_grid(config.grid_half_width, config.grid_points)

    histories = {c.obs_date: history_until(data.history, c.obs_date) for c in cycles}
    queue: asyncio.Queue = asyncio.Queue()
    for cycle in cycles:
        for model in roster:
            queue.put_nowait((model, cycle))
    total = queue.qsize()
    logger.info(f"Backtest started: {len(cycles)} cycles x {len(roster)} schemes = {total} tasks, "
                f"{config.threads} threads")

    results: Dict[Tuple[date, str], _TaskResult] = {}
    loop = asyncio.get_running_loop()

    async def worker(executor: ThreadPoolExecutor):
        while True:
            try:
                model, cycle = queue.get_nowait()
            except asyncio.QueueEmpty:
                return
            try:
                result = await loop.run_in_executor(
                    executor, _run_task, model, cycle, histories[cycle.obs_date], config, grid
                )
            except Exception as e:
                # 想定外の例外もこのモデル・サイクルの除外として扱う
                result = _TaskResult(model, cycle, None, {
                    "obs_date": cycle.obs_date.isoformat(), "expiry": cycle.expiry.isoformat(),
                    "model": model, "status": "excluded", "error": repr(e), "category": "system",
                }, error=e)
            if result.error is not None:
                handler.handle_error(result.error, {"model": model, "obs_date": str(cycle.obs_date)})
            results[(cycle.obs_date, model)] = result
            if len(results) % 50 == 0:
                logger.info(f"Progress: {len(results)}/{total} tasks")
            queue.task_done()

    with ThreadPoolExecutor(max_workers=config.threads) as executor:
        await asyncio.gather(*(worker(executor) for _ in range(config.threads)))

    order = {m: i for i, m in enumerate(roster)}
    ordered = [results[k] for k in sorted(results, key=lambda k: (k[0], order[k[1]]))]

    outcomes: Dict[str, List[ForecastOutcome]] = {m: [] for m in roster}
    exclusions: Dict[str, int] = {m: 0 for m in roster}
    for r in ordered:
        if r.outcome is None:
            exclusions[r.model] += 1
        else:
            outcomes[r.model].append(r.outcome)
    for model, count in exclusions.items():
        if count:
            logger.warning(f"{model}: {count} of {len(cycles)} cycles excluded")

    scoreboard = build_scoreboard(outcomes, roster, benchmark=BENCHMARK, alpha=config.alpha,
                                  split_date=config.split_date, exclusions=exclusions)
    bench = scoreboard.get(scoreboard.benchmark)
    logger.info(f"Benchmark {bench.model}: log-likelihood {bench.loglik:.4f}, CRPS {bench.crps:.6f}")

    fan_rows = [r.fan for r in ordered if r.fan is not None]
    fan_columns = ["obs_date", "expiry", "model", "f_t", "realization"] + \
        [f"q{int(round(p * 100)):02d}" for p in FAN_QUANTILES]
    return BacktestResult(
        scoreboard=scoreboard,
        cycles=cycles,
        audit=[r.audit for r in ordered],
        fans=pd.DataFrame(fan_rows, columns=fan_columns),
        pits={m: [o.pit for o in outcomes[m]] for m in roster},
        exclusions=exclusions,
        skipped=data.skipped_sections + skipped,
        error_stats=handler.get_error_stats(),
    )
