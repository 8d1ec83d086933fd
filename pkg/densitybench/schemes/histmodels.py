"""ヒストリカル予測スキーム（LN-HIS / BTS / GARCH-N / GARCH-t / GJR-FHS）"""

import logging
import math
from dataclasses import dataclass, asdict
from datetime import date
from typing import Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize
from scipy.signal import fftconvolve, lfilter
from scipy.stats import kurtosis, norm, skew

from ..utils.density import ForecastDensity, make_grid
from ..utils.error_handler import (
    CalibrationError,
    DataValidationError,
    DegenerateWindowError,
    ParameterError,
)

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]

HIST_MODELS = ("LN-HIS", "BTS", "GARCH-N", "GARCH-t", "GJR-FHS")
MIN_WINDOW = 60
MIN_GARCH_WINDOW = {"6m": 100, "5y": 250}
MIN_PATHS = 10_000
DOF_BOUNDS = (4.01, 100.0)
# persistence の上限: α + β + γ/2 ≤ 1 - 1e-6
_PERSISTENCE_CAP = 1.0 - 1e-6


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class ReturnWindow:
    """観測日以前の日次対数リターン"""
    returns: np.ndarray
    window_label: str
    end_date: Optional[date] = None

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        object.__setattr__(self, "returns", r)
        if r.size < MIN_WINDOW:
            raise DataValidationError(f"return window needs >= {MIN_WINDOW} returns, got {r.size}")
        if not np.all(np.isfinite(r)):
            raise DataValidationError("return window contains non-finite values")

    def __len__(self) -> int:
        return int(self.returns.size)

    @classmethod
    def from_history(cls, history, obs_date: date, length: int, label: str) -> "ReturnWindow":
        """PriceHistory から観測日までのウィンドウを切り出し"""
        returns, last = history.returns_until(obs_date, length)
        if last > obs_date:
            raise DataValidationError(f"window ends after observation date {obs_date}")
        return cls(returns=returns, window_label=label, end_date=last)


@dataclass(frozen=True)
class GarchParams:
    """GARCH 系パラメータ（日次）"""
    mu: float
    omega: float
    alpha: float
    beta: float
    gamma: float = 0.0
    dof: Optional[float] = None
    sigma2_0: float = 0.0   # 予測初日の条件付き分散
    variant: str = "N"
    loglik: float = float("nan")

    @property
    def persistence(self) -> float:
        return self.alpha + self.beta + 0.5 * self.gamma

    def validate(self) -> "GarchParams":
        values = (self.mu, self.omega, self.alpha, self.beta, self.gamma, self.sigma2_0)
        if not all(math.isfinite(v) for v in values):
            raise ParameterError(f"non-finite GARCH parameters: {self}")
        if min(self.omega, self.alpha, self.beta, self.gamma, self.sigma2_0) < 0.0:
            raise ParameterError(f"GARCH parameters must be non-negative: {self}")
        if self.persistence >= 1.0:
            raise ParameterError(f"GARCH persistence {self.persistence} is not < 1")
        if self.dof is not None and not self.dof > 2.0:
            raise ParameterError(f"Student-t dof must exceed 2, got {self.dof}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScaledInnovations:
    """フィルタ済み標準化残差 ẑ = ê/σ̂"""
    values: np.ndarray

    @property
    def skewness(self) -> float:
        return float(skew(self.values))

    @property
    def excess_kurtosis(self) -> float:
        return float(kurtosis(self.values, fisher=True))


@dataclass
class PathSet:
    """満期時点のシミュレーション価格"""
    terminal: np.ndarray
    f_anchor: float
    tau_days: int
    model: str
    seed: Optional[int] = None

    def __len__(self) -> int:
        return int(self.terminal.size)

    @property
    def log_returns(self) -> np.ndarray:
        return np.log(self.terminal / self.f_anchor)


# ---------------------------------------------------------------------------
# LN-HIS / BTS
# ---------------------------------------------------------------------------

def calibrate_lognormal_hist(window: ReturnWindow) -> Tuple[float, float]:
    """
    対数正規（GBM）の日次パラメータを推定

    Args:
        window: リターンウィンドウ

    Returns:
        (標本平均, 標本標準偏差 N-1)

    Raises:
        DegenerateWindowError: 分散ゼロ
    """
    r = window.returns
    mu = float(np.mean(r))
    sigma = float(np.std(r, ddof=1))
    if np.ptp(r) == 0.0 or not sigma > 0.0:
        raise DegenerateWindowError("degenerate window: zero return variance",
                                    best_params=(mu, sigma))
    return mu, sigma


def bootstrap_draw(window: ReturnWindow, mu: float, n: int, seed: SeedLike = None) -> np.ndarray:
    """
    平均除去済みリターンからの復元抽出に μ を加えた日次リターン

    Args:
        window: リターンウィンドウ
        mu: 日次平均リターン
        n: 抽出数
        seed: 乱数シード

    Returns:
        長さ n のリターン
    """
    demeaned = window.returns - window.returns.mean()
    return mu + _rng(seed).choice(demeaned, size=n, replace=True)


# ---------------------------------------------------------------------------
# GARCH
# ---------------------------------------------------------------------------

def garch_filter(resid: np.ndarray, omega: float, alpha: float, beta: float,
                 gamma: float, s0: float) -> np.ndarray:
    """
    条件付き分散フィルタ σ²_t = ω + (α + γI_{t-1})e²_{t-1} + βσ²_{t-1}

    Args:
        resid: 残差 e_t
        omega, alpha, beta, gamma: パラメータ
        s0: 初期分散

    Returns:
        長さ len(resid)+1 の分散系列（末尾は翌日の予測分散）
    """
    e2 = resid * resid
    shock = omega + (alpha + gamma * (resid < 0.0)) * e2
    tail, _ = lfilter([1.0], [1.0, -beta], shock, zi=[beta * s0])
    return np.concatenate(([s0], tail))


def _gaussian_nll(resid: np.ndarray, variances: np.ndarray) -> float:
    s = variances[:-1]
    if not np.all(s > 0.0) or not np.all(np.isfinite(s)):
        return float("inf")
    return 0.5 * float(np.sum(np.log(2.0 * math.pi) + np.log(s) + resid * resid / s))


def _unpack(theta: np.ndarray, leverage: bool) -> Tuple[float, float, float, float]:
    """制約なしパラメータ → (ω, α, β, γ)"""
    omega = math.exp(float(np.clip(theta[0], -60.0, 5.0)))
    logits = np.concatenate((theta[1:], [0.0]))
    weights = np.exp(logits - logits.max())
    weights = _PERSISTENCE_CAP * weights / weights.sum()
    if leverage:
        return omega, float(weights[0]), float(weights[1]), float(2.0 * weights[2])
    return omega, float(weights[0]), float(weights[1]), 0.0


def _pack(omega: float, alpha: float, beta: float, gamma: float, leverage: bool) -> np.ndarray:
    parts = [alpha, beta] + ([0.5 * gamma] if leverage else [])
    slack = max(1.0 - sum(parts) / _PERSISTENCE_CAP, 1e-6)
    parts = [max(p / _PERSISTENCE_CAP, 1e-8) for p in parts]
    return np.array([math.log(omega)] + [math.log(p / slack) for p in parts])


def calibrate_garch(window: ReturnWindow, variant: str = "N", *, n_starts: int = 5,
                    seed: SeedLike = 0, maxiter: Optional[int] = None) -> GarchParams:
    """
    ガウス準最尤法による GARCH(1,1) / GJR-GARCH(1,1) の推定

    t 版は GARCH-N と同じ分散パラメータを用い、自由度を標準化残差の尖度から求める。

    Args:
        window: リターンウィンドウ
        variant: "N" / "t" / "GJR"
        n_starts: マルチスタート数
        seed: 初期値摂動のシード
        maxiter: Nelder-Mead の反復上限

    Returns:
        GarchParams（loglik に達成対数尤度）

    Raises:
        DegenerateWindowError: 分散ゼロのウィンドウ
        CalibrationError: 全スタートが収束しない
    """
    if variant not in ("N", "t", "GJR"):
        raise ParameterError(f"unknown GARCH variant {variant}")
    minimum = MIN_GARCH_WINDOW.get(window.window_label, MIN_GARCH_WINDOW["6m"])
    if len(window) < minimum:
        raise DataValidationError(
            f"{window.window_label} GARCH window needs >= {minimum} returns, got {len(window)}"
        )

    mu = float(np.mean(window.returns))
    resid = window.returns - mu
    s0 = float(np.var(resid))
    if np.ptp(window.returns) == 0.0 or not s0 > 0.0:
        raise DegenerateWindowError("degenerate window: zero return variance")

    leverage = variant == "GJR"
    if leverage:
        alpha0, beta0, gamma0 = 0.03, 0.88, 0.08
    else:
        alpha0, beta0, gamma0 = 0.07, 0.90, 0.0
    omega0 = s0 * (1.0 - (alpha0 + beta0 + 0.5 * gamma0))
    base = _pack(omega0, alpha0, beta0, gamma0, leverage)
    dim = base.size
    maxiter = maxiter or 1000 * dim

    def objective(theta: np.ndarray) -> float:
        omega, alpha, beta, gamma = _unpack(theta, leverage)
        return _gaussian_nll(resid, garch_filter(resid, omega, alpha, beta, gamma, s0))

    rng = _rng(seed)
    starts = [base] + [base + rng.normal(0.0, 0.5, size=dim) for _ in range(n_starts - 1)]
    best = None
    converged = False
    for x0 in starts:
        simplex = np.vstack([x0, x0 + 0.5 * np.eye(dim)])
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxiter": maxiter, "maxfev": 2 * maxiter, "initial_simplex": simplex,
                                "xatol": 1e-6, "fatol": 1e-6})
        converged = converged or bool(res.success)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res

    if best is not None:
        # 最良点から再スタートして仕上げ
        polish = minimize(objective, best.x, method="Nelder-Mead",
                          options={"maxiter": maxiter, "xatol": 1e-8, "fatol": 1e-8,
                                   "initial_simplex": np.vstack([best.x, best.x + 0.05 * np.eye(dim)])})
        if polish.fun <= best.fun:
            best = polish

    if best is None or not converged:
        params = None
        if best is not None:
            omega, alpha, beta, gamma = _unpack(best.x, leverage)
            params = GarchParams(mu, omega, alpha, beta, gamma, variant=variant, loglik=-float(best.fun))
        raise CalibrationError(f"GARCH-{variant} optimizer did not converge", best_params=params)

    omega, alpha, beta, gamma = _unpack(best.x, leverage)
    variances = garch_filter(resid, omega, alpha, beta, gamma, s0)
    dof = None
    if variant == "t":
        dof = estimate_t_dof(resid / np.sqrt(variances[:-1]))

    params = GarchParams(
        mu=mu, omega=omega, alpha=alpha, beta=beta, gamma=gamma, dof=dof,
        sigma2_0=float(variances[-1]), variant=variant, loglik=-float(best.fun),
    ).validate()
    logger.debug(f"GARCH-{variant} fit: omega={omega:.3g} alpha={alpha:.4f} beta={beta:.4f} "
                 f"gamma={gamma:.4f} loglik={params.loglik:.2f}")
    return params


def scaled_innovations(window: ReturnWindow, params: GarchParams) -> ScaledInnovations:
    """推定済みパラメータでウィンドウをフィルタした標準化残差"""
    resid = window.returns - params.mu
    s0 = float(np.var(resid))
    variances = garch_filter(resid, params.omega, params.alpha, params.beta, params.gamma, s0)
    return ScaledInnovations(values=resid / np.sqrt(variances[:-1]))


def dof_from_kurtosis(kappa: float) -> float:
    """d = 6/κ + 4 を [4.01, 100] にクランプ"""
    low, high = DOF_BOUNDS
    if not kappa > 0.0:
        return high
    return float(min(max(6.0 / kappa + 4.0, low), high))


def estimate_t_dof(scaled_residuals: np.ndarray) -> float:
    """標準化残差の標本超過尖度から Student-t の自由度を推定"""
    z = np.asarray(scaled_residuals, dtype=float)
    if z.size < 100 or not np.all(np.isfinite(z)):
        raise DataValidationError(f"dof estimation needs >= 100 finite residuals, got {z.size}")
    return dof_from_kurtosis(float(kurtosis(z, fisher=True)))


# ---------------------------------------------------------------------------
# パスシミュレーション
# ---------------------------------------------------------------------------

def simulate_paths(
    model: str,
    params,
    innovations_source,
    F_t: float,
    tau_days: int,
    n_paths: int,
    seed: SeedLike = None
) -> PathSet:
    """
    満期価格 F_{t*} = F_t exp(τμ + Σ σ_{t+i} z_{t+i}) をシミュレーション

    Args:
        model: "LN-HIS" / "BTS" / "GARCH-N" / "GARCH-t" / "GJR-FHS"
        params: LN-HIS/BTS は (mu, sigma)、GARCH 系は GarchParams
        innovations_source: BTS は ReturnWindow、GJR-FHS は ScaledInnovations、他は None
        F_t: 観測日先物価格
        tau_days: 営業日数
        n_paths: パス数
        seed: 乱数シード

    Returns:
        PathSet
    """
    if model not in HIST_MODELS:
        raise ParameterError(f"unknown historical model {model}")
    if tau_days < 1 or n_paths < 1 or not F_t > 0.0:
        raise ParameterError(f"invalid simulation request: tau_days={tau_days}, n_paths={n_paths}, F={F_t}")
    rng = _rng(seed)

    if model == "LN-HIS":
        mu, sigma = params
        if sigma < 0.0:
            raise ParameterError(f"negative sigma {sigma}")
        total = tau_days * mu + sigma * math.sqrt(tau_days) * rng.standard_normal(n_paths)
    elif model == "BTS":
        mu = params[0]
        window = innovations_source
        total = bootstrap_draw(window, mu, n_paths * tau_days, rng).reshape(n_paths, tau_days).sum(axis=1)
    else:
        params.validate()
        if model == "GARCH-t" and params.dof is None:
            raise ParameterError("GARCH-t needs a dof estimate")
        if model == "GJR-FHS":
            if not isinstance(innovations_source, ScaledInnovations):
                raise ParameterError("GJR-FHS needs scaled innovations")
            pool = innovations_source.values
        variance = np.full(n_paths, params.sigma2_0)
        total = np.full(n_paths, tau_days * params.mu)
        for _ in range(tau_days):
            if model == "GARCH-N":
                z = rng.standard_normal(n_paths)
            elif model == "GARCH-t":
                z = rng.standard_t(params.dof, size=n_paths) * math.sqrt((params.dof - 2.0) / params.dof)
            else:
                z = rng.choice(pool, size=n_paths, replace=True)
            shock = np.sqrt(variance) * z
            total += shock
            variance = (params.omega + (params.alpha + params.gamma * (shock < 0.0)) * shock * shock
                        + params.beta * variance)

    seed_tag = seed if isinstance(seed, int) else None
    return PathSet(terminal=F_t * np.exp(total), f_anchor=float(F_t), tau_days=int(tau_days),
                   model=model, seed=seed_tag)


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman の経験則バンド幅"""
    n = x.size
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def empirical_density(path_set: PathSet, grid: Optional[np.ndarray] = None,
                      min_paths: int = MIN_PATHS) -> ForecastDensity:
    """
    パスから予測密度を構築

    CDF は中点規約の経験分布、pdf はビン化ガウスカーネル密度（FFT 畳み込み）。

    Args:
        path_set: シミュレーション結果
        grid: 対数リターングリッド（省略時は共通グリッド）
        min_paths: 必要な最小パス数

    Returns:
        ForecastDensity
    """
    if len(path_set) < min_paths:
        raise ParameterError(f"empirical density needs >= {min_paths} paths, got {len(path_set)}")
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    x = np.sort(path_set.log_returns)
    n = x.size

    cdf = 0.5 * (np.searchsorted(x, grid, side="left") + np.searchsorted(x, grid, side="right")) / n

    step = float(grid[1] - grid[0])
    bandwidth = max(silverman_bandwidth(x), step)
    # 線形ビン化
    pos = (x - grid[0]) / step
    inside = (pos >= 0.0) & (pos <= grid.size - 1)
    pos = pos[inside]
    left = np.minimum(np.floor(pos).astype(int), grid.size - 2)
    frac = pos - left
    weights = (np.bincount(left, weights=1.0 - frac, minlength=grid.size)
               + np.bincount(left + 1, weights=frac, minlength=grid.size))[:grid.size] / n
    half = min(int(math.ceil(6.0 * bandwidth / step)), grid.size // 2)
    offsets = np.arange(-half, half + 1) * step
    kernel = norm.pdf(offsets / bandwidth) / bandwidth
    pdf = np.clip(fftconvolve(weights, kernel, mode="same"), 0.0, None)

    return ForecastDensity.from_cdf(
        grid, cdf, path_set.f_anchor, pdf=pdf, model=path_set.model,
        diagnostics={"bandwidth": bandwidth, "n_paths": n},
    )
