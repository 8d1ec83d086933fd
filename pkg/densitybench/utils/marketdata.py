"""市場データの読み込み・検証・フィルタリング"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import IO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .error_handler import DataValidationError, InsufficientQuotesError

logger = logging.getLogger(__name__)

MIN_QUOTES = 8
TICK = 0.5
DAYS_PER_YEAR = 365.0
RATE_DAYS = 360.0

MONEYNESS_BUCKETS = ("deep_otm_put", "otm_put", "near_the_money", "otm_call", "deep_otm_call")

Source = Union[str, Path, IO[str]]


def option_time(obs_date: date, expiry: date, rate: float) -> Tuple[float, float]:
    """
    オプションの年換算期間と等価金利を計算

    ボラティリティ時間は act/365、割引は act/360 の単利を連続複利に換算する。

    Args:
        obs_date: 観測日
        expiry: 満期日
        rate: act/360 の年率

    Returns:
        (tau, r_eff)  e^{-r_eff·tau} が act/360 の割引係数と一致
    """
    days = (expiry - obs_date).days
    if days <= 0:
        raise DataValidationError(f"expiry {expiry} is not after observation date {obs_date}")
    tau = days / DAYS_PER_YEAR
    discount = 1.0 / (1.0 + rate * days / RATE_DAYS)
    r_eff = -math.log(discount) / tau
    return tau, r_eff


# ---------------------------------------------------------------------------
# データ型
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FuturesBar:
    """先物の日次清算値"""
    date: date
    settle: float


@dataclass(frozen=True)
class RateQuote:
    """短期金利（年率、act/360）"""
    date: date
    rate: float


@dataclass(frozen=True)
class OptionQuote:
    """オプションの気配値"""
    strike: float
    kind: str  # "C" / "P"
    bid: float
    ask: float

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    def problems(self) -> List[str]:
        """気配値の不整合を列挙"""
        issues = []
        if not (self.strike > 0.0):
            issues.append(f"strike {self.strike} is not positive")
        if self.kind not in ("C", "P"):
            issues.append(f"kind {self.kind!r} is not C or P")
        if not (math.isfinite(self.bid) and math.isfinite(self.ask)):
            issues.append("bid and ask must both be present")
        elif self.bid < 0.0 or self.ask < self.bid:
            issues.append(f"bid/ask {self.bid}/{self.ask} inconsistent")
        elif self.mid <= 0.0:
            issues.append("mid price is zero")
        return issues


@dataclass
class CrossSection:
    """観測日のフィルタ済みコール換算オプション群"""
    obs_date: Optional[date]
    expiry: Optional[date]
    futures: float
    rate: float
    tau: float
    strikes: np.ndarray
    mids: np.ndarray
    source_kinds: Tuple[str, ...] = ()
    n_removed: int = 0

    def __len__(self) -> int:
        return int(self.strikes.size)

    @property
    def r_eff(self) -> float:
        """tau と組み合わせる連続複利等価金利"""
        if self.obs_date is None or self.expiry is None:
            return self.rate
        return option_time(self.obs_date, self.expiry, self.rate)[1]

    def rescaled(self, factor: float) -> "CrossSection":
        """価格・行使価格を一律にスケール"""
        return replace(self, futures=self.futures * factor, strikes=self.strikes * factor,
                       mids=self.mids * factor)

    def check_invariants(self) -> List[str]:
        """減少性・凸性・最小数を検査"""
        problems = []
        if len(self) < MIN_QUOTES:
            problems.append(f"only {len(self)} quotes")
        if np.any(np.diff(self.strikes) <= 0.0):
            problems.append("strikes not strictly increasing")
        if _count_violations(self.strikes, self.mids) > 0:
            problems.append("mid prices not decreasing and convex in strike")
        return problems


@dataclass
class PriceHistory:
    """先物清算値の日次系列（金利付き）"""
    dates: np.ndarray                 # datetime64[D]
    settles: np.ndarray
    rates: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.settles.size)

    @property
    def bars(self) -> List[FuturesBar]:
        return [FuturesBar(d.astype(object), float(s)) for d, s in zip(self.dates, self.settles)]

    def log_returns(self) -> np.ndarray:
        """連続する行の対数リターン"""
        return np.diff(np.log(self.settles))

    def index_on(self, day: date) -> int:
        """指定日の行番号（存在しなければ例外）"""
        key = np.datetime64(day, "D")
        idx = int(np.searchsorted(self.dates, key))
        if idx >= self.dates.size or self.dates[idx] != key:
            raise DataValidationError(f"no futures price on {day}", context={"date": str(day)})
        return idx

    def has_date(self, day: date) -> bool:
        key = np.datetime64(day, "D")
        idx = int(np.searchsorted(self.dates, key))
        return idx < self.dates.size and self.dates[idx] == key

    def price_on(self, day: date) -> float:
        return float(self.settles[self.index_on(day)])

    def rate_on(self, day: date) -> float:
        if self.rates is None:
            return 0.0
        return float(self.rates[self.index_on(day)])

    def returns_until(self, day: date, length: int) -> Tuple[np.ndarray, date]:
        """
        観測日以前の直近 length 本の対数リターン

        Args:
            day: 観測日（この日の清算値まで使用）
            length: リターン本数

        Returns:
            (リターン配列, 最終リターンの日付)
        """
        idx = self.index_on(day)
        if idx < length:
            raise DataValidationError(
                f"window of {length} returns does not fit before {day} ({idx} available)",
                context={"date": str(day), "available": idx, "required": length}
            )
        prices = self.settles[idx - length: idx + 1]
        return np.diff(np.log(prices)), self.dates[idx].astype(object)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"date": pd.to_datetime(self.dates).strftime("%Y-%m-%d"),
                              "settle": self.settles})
        return frame


@dataclass
class RateSeries:
    """金利の時系列（前方補完で参照）"""
    quotes: List[RateQuote] = field(default_factory=list)

    def rate_on(self, day: date) -> float:
        if not self.quotes:
            raise DataValidationError("empty rate series")
        keys = np.array([np.datetime64(q.date, "D") for q in self.quotes])
        idx = int(np.searchsorted(keys, np.datetime64(day, "D"), side="right")) - 1
        # 最初の気配より前は最初の値を使う
        return self.quotes[max(idx, 0)].rate


# ---------------------------------------------------------------------------
# ローダー
# ---------------------------------------------------------------------------

def _read_csv(source: Source, required: Sequence[str], label: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(source, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"empty {label}")
    except (OSError, pd.errors.ParserError) as e:
        raise DataValidationError(f"cannot read {label}: {e}", original_error=e)
    frame.columns = [c.strip().lower() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataValidationError(f"{label} is missing columns {missing}")
    if frame.empty:
        raise DataValidationError(f"empty {label}")
    return frame


def _parse_dates(values: pd.Series, label: str) -> pd.Series:
    parsed = pd.to_datetime(values, format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna()
    if bad.any():
        row = int(np.argmax(bad.to_numpy()))
        raise DataValidationError(
            f"unparsable date {values.iloc[row]!r} in {label} row {row + 2}",
            context={"row": row + 2}
        )
    return parsed


def _parse_numbers(values: pd.Series, dates: pd.Series, label: str) -> pd.Series:
    parsed = pd.to_numeric(values, errors="coerce")
    bad = parsed.isna() | ~np.isfinite(parsed.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        row = int(np.argmax(bad.to_numpy()))
        raise DataValidationError(
            f"unparsable value {values.iloc[row]!r} in {label} on {dates.iloc[row].date()}",
            context={"date": str(dates.iloc[row].date())}
        )
    return parsed.astype(float)


def load_futures_history(source: Source) -> PriceHistory:
    """
    先物清算値 CSV（date,settle）を読み込み

    Args:
        source: ファイルパスまたはファイルオブジェクト

    Returns:
        日付順・重複除去済みの PriceHistory

    Raises:
        DataValidationError: 空ファイル、非正の価格、矛盾する重複日付、解析不能な行
    """
    try:
        frame = _read_csv(source, ("date", "settle"), "futures history")
    except DataValidationError as e:
        if "empty" in e.message:
            raise DataValidationError("empty history")
        raise
    dates = _parse_dates(frame["date"], "futures history")
    settles = _parse_numbers(frame["settle"], dates, "futures history")

    non_positive = settles <= 0.0
    if non_positive.any():
        day = dates[non_positive].iloc[0].date()
        raise DataValidationError(f"non-positive settle price on {day}", context={"date": str(day)})

    clean = pd.DataFrame({"date": dates, "settle": settles}).sort_values("date", kind="mergesort")
    conflicts = clean.groupby("date")["settle"].nunique()
    conflicts = conflicts[conflicts > 1]
    if not conflicts.empty:
        day = conflicts.index[0].date()
        raise DataValidationError(f"conflicting duplicate prices on {day}", context={"date": str(day)})
    clean = clean.drop_duplicates("date")

    logger.info(f"Loaded futures history: {len(clean)} rows "
                f"({clean['date'].iloc[0].date()} .. {clean['date'].iloc[-1].date()})")
    return PriceHistory(
        dates=clean["date"].to_numpy().astype("datetime64[D]"),
        settles=clean["settle"].to_numpy(dtype=float),
    )


def load_rates(source: Source) -> RateSeries:
    """金利 CSV（date,rate）を読み込み"""
    frame = _read_csv(source, ("date", "rate"), "rates")
    dates = _parse_dates(frame["date"], "rates")
    rates = _parse_numbers(frame["rate"], dates, "rates")
    clean = pd.DataFrame({"date": dates, "rate": rates}).sort_values("date", kind="mergesort")
    conflicts = clean.groupby("date")["rate"].nunique()
    if (conflicts > 1).any():
        day = conflicts[conflicts > 1].index[0].date()
        raise DataValidationError(f"conflicting duplicate rates on {day}", context={"date": str(day)})
    clean = clean.drop_duplicates("date")
    logger.info(f"Loaded {len(clean)} rate quotes")
    return RateSeries([RateQuote(d.date(), float(r)) for d, r in zip(clean["date"], clean["rate"])])


def attach_rates(history: PriceHistory, rates: RateSeries) -> PriceHistory:
    """先物の各日付に前方補完した金利を付与"""
    values = np.array([rates.rate_on(d.astype(object)) for d in history.dates])
    return replace(history, rates=values)


def load_option_quotes(source: Source) -> Dict[Tuple[date, date], List[OptionQuote]]:
    """
    オプション気配 CSV（obs_date,expiry,strike,kind,bid,ask）を読み込み

    bid と ask の両方がそろった気配のみ採用し、それ以外は件数をログに残して除外する。

    Args:
        source: ファイルパスまたはファイルオブジェクト

    Returns:
        (観測日, 満期日) -> 気配リスト
    """
    frame = _read_csv(source, ("obs_date", "expiry", "strike", "kind", "bid", "ask"), "option quotes")
    obs = _parse_dates(frame["obs_date"], "option quotes")
    exp = _parse_dates(frame["expiry"], "option quotes")
    strikes = pd.to_numeric(frame["strike"], errors="coerce").to_numpy(dtype=float, na_value=np.nan)
    bids = pd.to_numeric(frame["bid"], errors="coerce").to_numpy(dtype=float, na_value=np.nan)
    asks = pd.to_numeric(frame["ask"], errors="coerce").to_numpy(dtype=float, na_value=np.nan)
    kinds = frame["kind"].fillna("").str.strip().str.upper().to_numpy()

    grouped: Dict[Tuple[date, date], List[OptionQuote]] = {}
    rejected = Counter()
    for o, e, k, kind, b, a in zip(obs, exp, strikes, kinds, bids, asks):
        quote = OptionQuote(strike=float(k), kind=str(kind), bid=float(b), ask=float(a))
        issues = quote.problems()
        if issues:
            rejected[issues[0].split(" ")[0]] += 1
            continue
        grouped.setdefault((o.date(), e.date()), []).append(quote)

    if rejected:
        logger.warning(f"Rejected {sum(rejected.values())} option quotes: {dict(rejected)}")
    logger.info(f"Loaded option quotes for {len(grouped)} observation dates")
    return grouped


# ---------------------------------------------------------------------------
# パリティ・フィルタ
# ---------------------------------------------------------------------------

def put_to_call(put_mid: float, F: float, K: float, r: float, tau: float) -> float:
    """プット・コール・パリティ C = P + e^{-rτ}(F - K)（負値は呼び出し側で除外）"""
    return put_mid + math.exp(-r * tau) * (F - K)


def call_to_put(call_mid: float, F: float, K: float, r: float, tau: float) -> float:
    """put_to_call の逆変換"""
    return call_mid - math.exp(-r * tau) * (F - K)


def _violation_flags(strikes: np.ndarray, mids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """隣接ペアの非減少違反と隣接三つ組の凸性違反"""
    tol = 1e-12 * max(1.0, float(np.max(np.abs(mids)))) if mids.size else 0.0
    not_decreasing = np.diff(mids) >= -tol if mids.size > 1 else np.zeros(0, dtype=bool)
    if mids.size < 3:
        return not_decreasing, np.zeros(0, dtype=bool)
    slopes = np.diff(mids) / np.diff(strikes)
    scale = tol / max(float(np.min(np.diff(strikes))), 1e-12)
    not_convex = slopes[1:] < slopes[:-1] - scale
    return not_decreasing, not_convex


def _count_violations(strikes: np.ndarray, mids: np.ndarray) -> int:
    dec, conv = _violation_flags(strikes, mids)
    return int(dec.sum() + conv.sum())


def remove_arbitrage_violations(strikes: Sequence[float], mids: Sequence[float]) -> np.ndarray:
    """
    減少性・凸性に違反する気配を反復的に除去

    違反数を最も減らす気配を 1 件ずつ除去し、同数の場合は高い行使価格を除去する。

    Args:
        strikes: 昇順の行使価格
        mids: コール換算仲値

    Returns:
        残す気配のインデックス（元配列基準）
    """
    k = np.asarray(strikes, dtype=float)
    c = np.asarray(mids, dtype=float)
    keep = np.arange(k.size)
    current = _count_violations(k, c)
    while current > 0 and keep.size > 0:
        best_idx, best_count = -1, None
        for pos in range(keep.size):
            trial = np.delete(keep, pos)
            count = _count_violations(k[trial], c[trial])
            # 同数なら後（高い行使価格）を優先
            if best_count is None or count <= best_count:
                best_idx, best_count = pos, count
        logger.debug(f"Removing strike {k[keep[best_idx]]} ({current} -> {best_count} violations)")
        keep = np.delete(keep, best_idx)
        current = best_count
    return keep


def filter_cross_section(
    raw_quotes: Iterable[OptionQuote],
    F: float,
    r: float,
    tau: float,
    *,
    obs_date: Optional[date] = None,
    expiry: Optional[date] = None,
    rate: Optional[float] = None,
    min_quotes: int = MIN_QUOTES
) -> CrossSection:
    """
    生の気配からコール換算クロスセクションを構築

    OTM/ATM コールはそのまま、OTM プットはパリティでコールに換算し、
    負値・裁定違反を除去する。

    Args:
        raw_quotes: 気配のリスト
        F: 観測日先物価格
        r: 連続複利等価金利
        tau: 満期までの年数
        obs_date: 観測日
        expiry: 満期日
        rate: 元の act/360 金利（記録用）
        min_quotes: 最低気配数

    Returns:
        CrossSection

    Raises:
        InsufficientQuotesError: 残った気配が min_quotes 未満
    """
    quotes = [q for q in raw_quotes if not q.problems()]
    call_strikes = {q.strike for q in quotes if q.kind == "C" and q.strike >= F}

    by_strike: Dict[float, Tuple[float, str, float]] = {}
    n_negative = 0
    for q in quotes:
        if q.kind == "C":
            if q.strike < F:
                continue
            value = q.mid
        else:
            if q.strike > F or (q.strike == F and q.strike in call_strikes):
                continue
            value = put_to_call(q.mid, F, q.strike, r, tau)
            if value <= 0.0:
                n_negative += 1
                continue
        spread = q.ask - q.bid
        # 同一行使価格はスプレッドの狭い気配を採用
        if q.strike not in by_strike or spread < by_strike[q.strike][2]:
            by_strike[q.strike] = (value, q.kind, spread)

    strikes = np.array(sorted(by_strike), dtype=float)
    mids = np.array([by_strike[k][0] for k in strikes], dtype=float)
    kinds = tuple(by_strike[k][1] for k in strikes)

    keep = remove_arbitrage_violations(strikes, mids)
    n_removed = n_negative + (strikes.size - keep.size)
    section = CrossSection(
        obs_date=obs_date, expiry=expiry, futures=float(F),
        rate=float(r if rate is None else rate), tau=float(tau),
        strikes=strikes[keep], mids=mids[keep],
        source_kinds=tuple(kinds[i] for i in keep), n_removed=n_removed,
    )
    if len(section) < min_quotes:
        raise InsufficientQuotesError(
            f"insufficient quotes: {len(section)} survive filtering (minimum {min_quotes})",
            n_quotes=len(section),
            context={"obs_date": str(obs_date), "removed": n_removed}
        )
    if n_removed:
        logger.debug(f"Cross-section {obs_date}: removed {n_removed} quotes, kept {len(section)}")
    return section


def moneyness_bucket(F: float, K: float) -> str:
    """F/K による区分（境界値は内側の区分）"""
    m = F / K
    if m > 1.10:
        return "deep_otm_put"
    if m > 1.03:
        return "otm_put"
    if m >= 0.97:
        return "near_the_money"
    if m >= 0.90:
        return "otm_call"
    return "deep_otm_call"


def option_summary(sections: Sequence[CrossSection]) -> Dict[str, pd.DataFrame]:
    """
    オプションデータの要約（種類別件数とマネーネス区分）

    Args:
        sections: フィルタ済みクロスセクション

    Returns:
        {"types": 種類別統計, "moneyness": 区分別件数と比率}
    """
    rows = []
    for kind_label, kind_code in (("Calls", "C"), ("Puts", "P"), ("Overall", None)):
        per_day = np.array([
            sum(1 for k in s.source_kinds if kind_code is None or k == kind_code) for s in sections
        ], dtype=int)
        rows.append({
            "option_type": kind_label,
            "total": int(per_day.sum()),
            "average_per_day": int(round(per_day.mean())) if per_day.size else 0,
            "maximum_per_day": int(per_day.max()) if per_day.size else 0,
            "minimum_per_day": int(per_day.min()) if per_day.size else 0,
        })

    counts = Counter(moneyness_bucket(s.futures, k) for s in sections for k in s.strikes)
    total = sum(counts.values())
    bucket_rows = [{
        "moneyness": name,
        "count": counts.get(name, 0),
        "percent": round(100.0 * counts.get(name, 0) / total, 2) if total else 0.0,
    } for name in MONEYNESS_BUCKETS]
    return {"types": pd.DataFrame(rows), "moneyness": pd.DataFrame(bucket_rows)}


def third_friday_expiries(start: date, end: date) -> List[date]:
    """期間内の各月第 3 金曜日"""
    return [ts.date() for ts in pd.date_range(start, end, freq="WOM-3FRI")]
