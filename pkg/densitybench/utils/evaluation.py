"""予測密度の検証: PIT・適合度検定・スコアリングルール・IFS"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.stats import chi2, kstest, kstwobign, kurtosis, norm, rankdata, skew

from .density import ForecastDensity
from .error_handler import DataValidationError, EvaluationError

logger = logging.getLogger(__name__)

PIT_CLAMP = 1e-6
PDF_FLOOR = 1e-12
JB_P_CAP = 0.5
MIN_TEST_LENGTH = 30
TEST_NAMES = ("berkowitz", "jarque_bera", "ks")


# ---------------------------------------------------------------------------
# PIT
# ---------------------------------------------------------------------------

def pit(density: ForecastDensity, realization: float) -> float:
    """
    実現値における事前 CDF（[1e-6, 1-1e-6] にクランプ）

    Args:
        density: 予測密度
        realization: 満期実現価格

    Returns:
        PIT 値
    """
    if not realization > 0.0:
        raise EvaluationError(f"realization must be positive, got {realization}")
    value = density.cdf_at(math.log(realization / density.f_anchor))
    return float(min(max(value, PIT_CLAMP), 1.0 - PIT_CLAMP))


@dataclass
class PitSequence:
    """PIT と T-PIT の系列"""
    pits: np.ndarray
    tpits: np.ndarray
    dates: List[date] = field(default_factory=list)

    @classmethod
    def from_pits(cls, pits: Sequence[float], dates: Sequence[date] = ()) -> "PitSequence":
        p = np.clip(np.asarray(pits, dtype=float), PIT_CLAMP, 1.0 - PIT_CLAMP)
        return cls(pits=p, tpits=norm.ppf(p), dates=list(dates))

    def __len__(self) -> int:
        return int(self.pits.size)


@dataclass
class TestResult:
    """検定結果"""
    statistic: float
    p_value: float
    components: Dict[str, float] = field(default_factory=dict)

    def passed(self, alpha: float = 0.05) -> bool:
        return self.p_value > alpha

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# 検定
# ---------------------------------------------------------------------------

def _ar1_exact_loglik(y: np.ndarray, mu: float, var: float, rho: float) -> float:
    """定常初期項を含む AR(1) ガウス対数尤度"""
    first = y[0] - mu
    innov = (y[1:] - mu) - rho * (y[:-1] - mu)
    stationary_var = var / (1.0 - rho * rho)
    ll = -0.5 * (math.log(2.0 * math.pi * stationary_var) + first * first / stationary_var)
    ll -= 0.5 * innov.size * math.log(2.0 * math.pi * var)
    ll -= 0.5 * float(np.sum(innov * innov)) / var
    return ll


def _ar1_conditional_lr(y: np.ndarray) -> float:
    """初期項を条件とした AR(1) の LR3（OLS 閉形式）"""
    x, z = y[:-1], y[1:]
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    resid = z - design @ coef
    var = float(np.mean(resid * resid))
    n = z.size
    ll_free = -0.5 * n * (math.log(2.0 * math.pi * var) + 1.0)
    ll_null = -0.5 * n * math.log(2.0 * math.pi) - 0.5 * float(np.sum(z * z))
    return -2.0 * (ll_null - ll_free)


def berkowitz_lr3(tpits: Sequence[float]) -> TestResult:
    """
    T-PIT の平均 0・分散 1・自己相関 0 を同時に検定する尤度比検定

    Args:
        tpits: T-PIT 系列（30 以上）

    Returns:
        TestResult（components に mu, variance, rho と条件付き版 LR3）

    Raises:
        EvaluationError: 系列が短い、または定数
    """
    y = np.asarray(tpits, dtype=float)
    if y.size < MIN_TEST_LENGTH:
        raise EvaluationError(f"Berkowitz test needs >= {MIN_TEST_LENGTH} values, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise EvaluationError("Berkowitz test needs finite T-PIT values")
    if np.ptp(y) == 0.0:
        raise EvaluationError("Berkowitz test on a constant sequence")

    def nll(theta: np.ndarray) -> float:
        mu, log_var, z = theta
        return -_ar1_exact_loglik(y, mu, math.exp(log_var), math.tanh(z))

    x, z_next = y[:-1] - y.mean(), y[1:] - y.mean()
    rho0 = float(np.clip(np.dot(x, z_next) / max(np.dot(x, x), 1e-300), -0.95, 0.95))
    theta0 = np.array([y.mean(), math.log(max(np.var(y) * (1.0 - rho0 ** 2), 1e-8)), math.atanh(rho0)])
    res = minimize(nll, theta0, method="L-BFGS-B",
                   bounds=[(None, None), (-25.0, 10.0), (-6.0, 6.0)])
    ll_free = -float(res.fun)
    ll_null = _ar1_exact_loglik(y, 0.0, 1.0, 0.0)
    lr3 = max(-2.0 * (ll_null - ll_free), 0.0)
    mu, log_var, z = res.x
    return TestResult(
        statistic=lr3,
        p_value=float(chi2.sf(lr3, 3)),
        components={"mu": float(mu), "variance": math.exp(log_var), "rho": math.tanh(z),
                    "lr3_conditional": _ar1_conditional_lr(y)},
    )


def jb_statistic(tpits: Sequence[float]) -> Tuple[float, float, float]:
    """(JB, 歪度, 尖度) を標準的な標本モーメントで計算"""
    y = np.asarray(tpits, dtype=float)
    s = float(skew(y))
    k = float(kurtosis(y, fisher=False))
    return y.size / 6.0 * (s * s + (k - 3.0) ** 2 / 4.0), s, k


def jarque_bera(tpits: Sequence[float]) -> TestResult:
    """Jarque-Bera 検定（p 値は 0.5 で上限）"""
    jb, s, k = jb_statistic(tpits)
    if not math.isfinite(jb):
        raise EvaluationError("Jarque-Bera statistic is not finite (constant sequence?)")
    return TestResult(statistic=jb, p_value=float(min(JB_P_CAP, chi2.sf(jb, 2))),
                      components={"skewness": s, "kurtosis": k})


def ks_normal(tpits: Sequence[float]) -> TestResult:
    """N(0,1) に対する 1 標本 KS 検定（漸近 Kolmogorov 分布）"""
    y = np.asarray(tpits, dtype=float)
    if y.size < MIN_TEST_LENGTH:
        logger.warning(f"KS test on only {y.size} values")
    d = float(kstest(y, "norm").statistic)
    return TestResult(statistic=d, p_value=float(kstwobign.sf(math.sqrt(y.size) * d)))


# ---------------------------------------------------------------------------
# スコアリングルール
# ---------------------------------------------------------------------------

def log_density(density: ForecastDensity, realization: float) -> float:
    """実現対数リターンにおける log pdf（1e-12 で下限）"""
    value = density.pdf_at(math.log(realization / density.f_anchor))
    return math.log(max(value, PDF_FLOOR))


def log_score(densities: Sequence[ForecastDensity], realizations: Sequence[float]) -> float:
    """L = Σ log f_t(x_t*)"""
    if len(densities) != len(realizations):
        raise EvaluationError("log_score needs one realization per density")
    return float(sum(log_density(d, x) for d, x in zip(densities, realizations)))


def crps_from_cdf(x: np.ndarray, cdf: np.ndarray, x_obs: float) -> float:
    """
    ∫ (CDF(x) - 1{x ≥ x_obs})² dx を台形則で計算

    メッシュ外は CDF を 0 / 1 とみなし、実現値がメッシュ外なら端からの距離を加える。

    Args:
        x: 昇順メッシュ
        cdf: メッシュ上の CDF
        x_obs: 実現値

    Returns:
        内側の積分値（平方根をとる前）
    """
    x = np.asarray(x, dtype=float)
    cdf = np.asarray(cdf, dtype=float)
    if x_obs <= x[0]:
        return float(np.trapezoid((1.0 - cdf) ** 2, x) + (x[0] - x_obs))
    if x_obs >= x[-1]:
        return float(np.trapezoid(cdf ** 2, x) + (x_obs - x[-1]))
    idx = int(np.searchsorted(x, x_obs))
    c_obs = float(np.interp(x_obs, x, cdf))
    left_x = np.concatenate((x[:idx], [x_obs]))
    left_c = np.concatenate((cdf[:idx], [c_obs]))
    right_x = np.concatenate(([x_obs], x[idx:]))
    right_c = np.concatenate(([c_obs], cdf[idx:]))
    return float(np.trapezoid(left_c ** 2, left_x) + np.trapezoid((1.0 - right_c) ** 2, right_x))


def crps_rb(density: ForecastDensity, realization: float) -> float:
    """単純リターン空間での CRPS の平方根（日付ごとの値）"""
    simple = np.expm1(density.grid)
    x_obs = realization / density.f_anchor - 1.0
    return math.sqrt(max(crps_from_cdf(simple, density.cdf, x_obs), 0.0))


# ---------------------------------------------------------------------------
# 正規化スコアと IFS
# ---------------------------------------------------------------------------

def normalize_consistency(p_values: Mapping[str, Sequence[float]], alpha: float = 0.05) -> Dict[str, float]:
    """
    統計的一貫性スコア

    検定ごとに非棄却で 0.25、残り 0.25 は各検定の p 値の経験的位置の平均。

    Args:
        p_values: モデル名 -> (Berkowitz, JB, KS) の p 値（小数）
        alpha: 有意水準

    Returns:
        モデル名 -> スコア
    """
    models = list(p_values)
    table = np.array([list(p_values[m]) for m in models], dtype=float)
    if table.ndim != 2 or table.shape[1] != len(TEST_NAMES):
        raise EvaluationError("consistency scoring needs three p-values per model")
    lo, hi = table.min(axis=0), table.max(axis=0)
    span = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        position = np.where(span > 0.0, (table - lo) / np.where(span > 0.0, span, 1.0), 1.0)
    passes = (table > alpha).sum(axis=1)
    scores = 0.25 * passes + 0.25 * position.mean(axis=1)
    return {m: float(s) for m, s in zip(models, scores)}


def normalize_gaussian(values: Mapping[str, float], higher_better: bool = True) -> Dict[str, float]:
    """
    モデル間の値を正規分布とみなした分位位置 Φ((x - m)/s)（s は N-1 標本標準偏差）

    Args:
        values: モデル名 -> 値
        higher_better: True なら大きいほど良い

    Returns:
        モデル名 -> [0,1] スコア
    """
    models = list(values)
    x = np.array([values[m] for m in models], dtype=float)
    s = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    if not s > 0.0:
        return {m: 0.5 for m in models}
    z = (x - x.mean()) / s
    scores = norm.cdf(z if higher_better else -z)
    return {m: float(v) for m, v in zip(models, scores)}


def ifs(consistency: float, accuracy: float, errors: float) -> float:
    """Integrated Forecast Score（3 スコアの平均）"""
    return (consistency + accuracy + errors) / 3.0


def descending_ranks(scores: Mapping[str, float]) -> Dict[str, int]:
    """スコア降順の順位（同点は最小順位）"""
    models = list(scores)
    ranks = rankdata([-scores[m] for m in models], method="min")
    return {m: int(r) for m, r in zip(models, ranks)}


def score_table(p_values: Mapping[str, Sequence[float]], loglik: Mapping[str, float],
                crps: Mapping[str, float], alpha: float = 0.05) -> pd.DataFrame:
    """
    p 値・対数尤度・CRPS から正規化スコア・IFS・順位の表を作成

    Args:
        p_values: モデル名 -> (Berkowitz, JB, KS) の p 値（小数）
        loglik: モデル名 -> 対数尤度（超過値可）
        crps: モデル名 -> CRPS（超過値可）
        alpha: 有意水準

    Returns:
        IFS 降順の DataFrame
    """
    names = set(p_values)
    if names != set(loglik) or names != set(crps):
        mismatch = sorted(names.symmetric_difference(loglik).union(names.symmetric_difference(crps)))
        raise EvaluationError(f"model names differ across inputs: {mismatch}")
    models = sorted(names)
    consistency = normalize_consistency({m: p_values[m] for m in models}, alpha)
    accuracy = normalize_gaussian({m: loglik[m] for m in models}, higher_better=True)
    errors = normalize_gaussian({m: crps[m] for m in models}, higher_better=False)
    total = {m: ifs(consistency[m], accuracy[m], errors[m]) for m in models}

    ranks = {key: descending_ranks(scores) for key, scores in
             (("consistency", consistency), ("accuracy", accuracy), ("errors", errors), ("ifs", total))}
    rows = []
    for m in models:
        rows.append({
            "model": m,
            "ifs": total[m],
            "consistency": consistency[m],
            "consistency_rank": ranks["consistency"][m],
            "accuracy": accuracy[m],
            "accuracy_rank": ranks["accuracy"][m],
            "errors": errors[m],
            "errors_rank": ranks["errors"][m],
            "ifs_rank": ranks["ifs"][m],
            "consistent": bool(all(p > alpha for p in p_values[m])),
        })
    frame = pd.DataFrame(rows)
    return frame.sort_values(["ifs_rank", "model"], kind="mergesort").reset_index(drop=True)


# ---------------------------------------------------------------------------
# 記述統計・ヒストグラム
# ---------------------------------------------------------------------------

def tpit_descriptives(tpits: Sequence[float]) -> Dict[str, float]:
    """T-PIT の記述統計（平均・分位点・標準偏差・歪度・尖度・AR(1)）"""
    y = np.asarray(tpits, dtype=float)
    centred = y - y.mean()
    denom = float(np.dot(centred, centred))
    return {
        "mean": float(y.mean()),
        "p05": float(np.percentile(y, 5)),
        "median": float(np.median(y)),
        "p95": float(np.percentile(y, 95)),
        "std": float(np.std(y, ddof=1)) if y.size > 1 else 0.0,
        "skewness": float(skew(y)),
        "kurtosis": float(kurtosis(y, fisher=False)),
        "ar1": float(np.dot(centred[1:], centred[:-1]) / denom) if denom > 0.0 else 0.0,
    }


def pit_histogram(pits: Sequence[float], bins: int = 20) -> pd.DataFrame:
    """PIT の等幅ヒストグラム（期待度数付き）"""
    p = np.asarray(pits, dtype=float)
    counts, edges = np.histogram(p, bins=bins, range=(0.0, 1.0))
    return pd.DataFrame({
        "bin_lower": edges[:-1],
        "bin_upper": edges[1:],
        "count": counts,
        "expected": np.full(bins, p.size / bins),
    })


# ---------------------------------------------------------------------------
# ScoreBoard
# ---------------------------------------------------------------------------

@dataclass
class ForecastOutcome:
    """1 モデル・1 サイクルの評価値"""
    model: str
    obs_date: date
    pit: float
    log_density: float
    crps: float


def _rounded(value: Any, digits: int = 10) -> Any:
    if isinstance(value, float):
        return round(value, digits) if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _rounded(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(v, digits) for v in value]
    return value


@dataclass
class ModelScore:
    """モデルごとの集計結果"""
    model: str
    n_cycles: int
    n_excluded: int
    berkowitz: Optional[TestResult]
    jarque_bera: Optional[TestResult]
    ks: Optional[TestResult]
    loglik: float
    loglik_excess: float
    crps: float
    crps_excess: float
    subperiods: Dict[str, Dict[str, float]] = field(default_factory=dict)
    descriptives: Dict[str, float] = field(default_factory=dict)
    consistency: float = float("nan")
    accuracy: float = float("nan")
    errors: float = float("nan")
    ifs: float = float("nan")
    ranks: Dict[str, int] = field(default_factory=dict)
    consistent: bool = False

    def p_values(self) -> Tuple[float, float, float]:
        return tuple(t.p_value if t is not None else 0.0 for t in (self.berkowitz, self.jarque_bera, self.ks))


@dataclass
class ScoreBoard:
    """全モデルの検定・スコア・IFS"""
    models: List[ModelScore]
    benchmark: str
    benchmark_fallback: bool
    alpha: float
    split_date: Optional[date] = None

    def get(self, model: str) -> ModelScore:
        for m in self.models:
            if m.model == model:
                return m
        raise KeyError(model)

    def to_dict(self) -> Dict[str, Any]:
        models = [asdict(m) for m in self.models]
        return _rounded({
            "benchmark": self.benchmark,
            "benchmark_fallback": self.benchmark_fallback,
            "alpha": self.alpha,
            "split_date": str(self.split_date) if self.split_date else None,
            "models": models,
        })

    def to_json(self) -> str:
        """決定論的な JSON（キー順・丸め固定）"""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    def table2(self, p_unit: str = "percent") -> pd.DataFrame:
        """適合度検定の表"""
        scale = 100.0 if p_unit == "percent" else 1.0
        rows = []
        for m in self.models:
            b, j, k = m.berkowitz, m.jarque_bera, m.ks
            rows.append({
                "model": m.model,
                "mu": b.components["mu"] if b else np.nan,
                "variance": b.components["variance"] if b else np.nan,
                "rho": b.components["rho"] if b else np.nan,
                "lr3": b.statistic if b else np.nan,
                "lr3_p": b.p_value * scale if b else np.nan,
                "jb": j.statistic if j else np.nan,
                "jb_p": j.p_value * scale if j else np.nan,
                "ks": k.statistic * 100.0 if k else np.nan,
                "ks_p": k.p_value * scale if k else np.nan,
                "n_cycles": m.n_cycles,
                "n_excluded": m.n_excluded,
            })
        return pd.DataFrame(rows)

    def table3(self) -> pd.DataFrame:
        """T-PIT 記述統計の表"""
        return pd.DataFrame([{"model": m.model, **m.descriptives} for m in self.models])

    def _period_table(self, key: str, excess: str) -> pd.DataFrame:
        rows = []
        bench = next((m for m in self.models if m.model == self.benchmark), None)
        for m in self.models:
            row = {"model": m.model}
            for label, values in m.subperiods.items():
                base = bench.subperiods.get(label, {}).get(key, 0.0) if bench else 0.0
                row[label] = values[key] if m.model == self.benchmark else values[key] - base
            row["entire_sample"] = getattr(m, key) if m.model == self.benchmark else getattr(m, excess)
            row["n_cycles"] = m.n_cycles
            row["n_excluded"] = m.n_excluded
            row["relative_to"] = self.benchmark
            row["benchmark_fallback"] = self.benchmark_fallback
            rows.append(row)
        return pd.DataFrame(rows)

    def table4(self) -> pd.DataFrame:
        """対数尤度（ベンチマークは絶対値、他は超過値）"""
        return self._period_table("loglik", "loglik_excess")

    def table5(self) -> pd.DataFrame:
        """CRPS（%、ベンチマークは絶対値、他は超過値）"""
        frame = self._period_table("crps", "crps_excess")
        numeric = [c for c in frame.columns if c not in ("model", "n_cycles", "n_excluded", "relative_to", "benchmark_fallback")]
        frame[numeric] = frame[numeric] * 100.0
        return frame

    def table6(self) -> pd.DataFrame:
        """IFS と正規化スコア（一貫性グループ・IFS 順）"""
        rows = [{
            "model": m.model,
            "group": "consistent" if m.consistent else "non-consistent",
            "ifs": m.ifs,
            "consistency": m.consistency,
            "consistency_rank": m.ranks.get("consistency"),
            "accuracy": m.accuracy,
            "accuracy_rank": m.ranks.get("accuracy"),
            "errors": m.errors,
            "errors_rank": m.ranks.get("errors"),
            "ifs_rank": m.ranks.get("ifs"),
        } for m in self.models]
        frame = pd.DataFrame(rows)
        frame["_order"] = frame["group"].map({"consistent": 0, "non-consistent": 1})
        frame = frame.sort_values(["_order", "ifs_rank", "model"], kind="mergesort")
        return frame.drop(columns="_order").reset_index(drop=True)


def _safe_test(fn, tpits: np.ndarray, model: str) -> Optional[TestResult]:
    try:
        return fn(tpits)
    except EvaluationError as e:
        logger.warning(f"{fn.__name__} skipped for {model}: {e.message}")
        return None


def build_scoreboard(
    outcomes: Mapping[str, Sequence[ForecastOutcome]],
    roster: Sequence[str],
    *,
    benchmark: str = "LN-HIS(6m)",
    alpha: float = 0.05,
    split_date: Optional[date] = None,
    exclusions: Optional[Mapping[str, int]] = None
) -> ScoreBoard:
    """
    モデルごとの評価値から ScoreBoard を構築

    ベンチマークがロースターにない場合は先頭モデルを基準にし、fallback を記録する。
    IFS は全期間の値のみで正規化する。

    Args:
        outcomes: モデル名 -> サイクルごとの評価値（順序は問わない）
        roster: 出力順のモデル名
        benchmark: 超過値の基準モデル
        alpha: 有意水準
        split_date: サブ期間の分割日
        exclusions: モデル名 -> 除外サイクル数

    Returns:
        ScoreBoard

    Raises:
        DataValidationError: 基準モデルに評価済みサイクルがない
    """
    exclusions = dict(exclusions or {})
    fallback = benchmark not in roster
    if fallback:
        benchmark = roster[0]
        logger.warning(f"Benchmark missing from roster, excess figures relative to {benchmark}")

    scores: List[ModelScore] = []
    for model in roster:
        items = sorted(outcomes.get(model, ()), key=lambda o: o.obs_date)
        seq = PitSequence.from_pits([o.pit for o in items], [o.obs_date for o in items])
        lds = np.array([o.log_density for o in items])
        crps = np.array([o.crps for o in items])

        subperiods: Dict[str, Dict[str, float]] = {}
        if split_date is not None:
            early = np.array([o.obs_date < split_date for o in items], dtype=bool)
            for label, mask in ((f"before_{split_date}", early), (f"from_{split_date}", ~early)):
                subperiods[label] = {
                    "loglik": float(lds[mask].sum()),
                    "crps": float(crps[mask].mean()) if mask.any() else float("nan"),
                    "n": int(mask.sum()),
                }

        scores.append(ModelScore(
            model=model,
            n_cycles=len(items),
            n_excluded=int(exclusions.get(model, 0)),
            berkowitz=_safe_test(berkowitz_lr3, seq.tpits, model),
            jarque_bera=_safe_test(jarque_bera, seq.tpits, model) if len(seq) >= 3 else None,
            ks=ks_normal(seq.tpits) if len(seq) else None,
            loglik=float(lds.sum()),
            loglik_excess=0.0,
            crps=float(crps.mean()) if crps.size else float("nan"),
            crps_excess=0.0,
            subperiods=subperiods,
            descriptives=tpit_descriptives(seq.tpits) if len(seq) else {},
        ))

    bench = next(s for s in scores if s.model == benchmark)
    if bench.n_cycles == 0:
        raise DataValidationError(
            f"benchmark {benchmark} has no scored cycles; excess log score and CRPS are undefined",
            context={"benchmark": benchmark, "excluded": bench.n_excluded},
        )
    for s in scores:
        s.loglik_excess = s.loglik - bench.loglik
        s.crps_excess = s.crps - bench.crps

    usable = [s for s in scores if s.n_cycles > 0]
    consistency = normalize_consistency({s.model: s.p_values() for s in usable}, alpha) if usable else {}
    accuracy = normalize_gaussian({s.model: s.loglik_excess for s in usable}, higher_better=True)
    errors = normalize_gaussian({s.model: s.crps_excess for s in usable}, higher_better=False)
    for s in usable:
        s.consistency, s.accuracy, s.errors = consistency[s.model], accuracy[s.model], errors[s.model]
        s.ifs = ifs(s.consistency, s.accuracy, s.errors)
        s.consistent = all(p > alpha for p in s.p_values())

    for key in ("consistency", "accuracy", "errors", "ifs"):
        ranks = descending_ranks({s.model: getattr(s, key) for s in usable})
        for s in usable:
            s.ranks[key] = ranks[s.model]

    return ScoreBoard(models=scores, benchmark=benchmark, benchmark_fallback=fallback,
                      alpha=alpha, split_date=split_date)
