"""リスク中立予測スキーム（LN-ATM / HESTON / BATES / VG / BL-MALZ）"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize
from scipy.stats import norm

from ..utils.density import ForecastDensity, make_grid, repair_cdf
from ..utils.error_handler import (
    DensityBenchError,
    ParameterError,
    QuadratureError,
)
from ..utils.marketdata import CrossSection
from ..utils.pricing import (
    BatesParams,
    HestonParams,
    VGParams,
    black76_implied_vol,
    black76_price,
    cf_call_price,
    cf_to_cdf_with_info,
    characteristic_function,
)

logger = logging.getLogger(__name__)

SRE_MODELS = ("HESTON", "BATES", "VG")
MALZ_STEP = 0.01
MALZ_MESH = (0.3, 3.0)
REPAIR_WARN = 1e-6
_PENALTY = 1e6


@dataclass
class SreFit:
    """SRE キャリブレーション結果"""
    model: str
    params: Any
    sre: float
    n_options: int
    per_option_errors: np.ndarray
    converged: bool = True
    n_evaluations: int = 0
    n_rejected: int = 0

    def summary(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "params": self.params.to_dict(),
            "sre": self.sre,
            "n_options": self.n_options,
            "converged": self.converged,
            "n_evaluations": self.n_evaluations,
            "n_rejected": self.n_rejected,
        }


@dataclass
class VolCurve:
    """行使価格方向の自然 3 次スプライン（端点外はフラット）"""
    strikes: np.ndarray
    vols: np.ndarray
    _spline: Optional[CubicSpline] = field(default=None, repr=False)

    def __post_init__(self):
        self.strikes = np.asarray(self.strikes, dtype=float)
        self.vols = np.asarray(self.vols, dtype=float)
        if self.strikes.size < 2 or self.strikes.size != self.vols.size:
            raise ParameterError(f"vol curve needs >= 2 matching knots, got {self.strikes.size}")
        if np.any(np.diff(self.strikes) <= 0.0):
            raise ParameterError("vol curve strikes must be strictly increasing (duplicate strikes?)")
        if np.any(self.vols <= 0.0):
            raise ParameterError("vol curve needs positive vols")
        self._spline = CubicSpline(self.strikes, self.vols, bc_type="natural")

    def __call__(self, K) -> np.ndarray:
        k = np.clip(np.asarray(K, dtype=float), self.strikes[0], self.strikes[-1])
        return np.maximum(self._spline(k), 1e-6)


def implied_vols(cross_section: CrossSection) -> Tuple[np.ndarray, np.ndarray]:
    """
    各気配のインプライドボラティリティ（反転できない気配は除外）

    Returns:
        (行使価格, ボラティリティ)
    """
    r, tau, F = cross_section.r_eff, cross_section.tau, cross_section.futures
    strikes, vols = [], []
    for K, mid in zip(cross_section.strikes, cross_section.mids):
        try:
            vols.append(black76_implied_vol(float(mid), F, float(K), r, tau, "call"))
            strikes.append(float(K))
        except ParameterError as e:
            logger.warning(f"Skipping strike {K} on {cross_section.obs_date}: {e.message}")
    return np.array(strikes), np.array(vols)


def atm_vol(cross_section: CrossSection) -> float:
    """
    先物価格を挟む 2 つの行使価格のインプライドボラティリティを線形補間

    Args:
        cross_section: クロスセクション（2 件以上）

    Returns:
        ATM ボラティリティ
    """
    strikes, mids = cross_section.strikes, cross_section.mids
    if strikes.size < 2:
        raise ParameterError("atm_vol needs at least two quotes")
    F, r, tau = cross_section.futures, cross_section.r_eff, cross_section.tau

    def vol(i: int) -> float:
        return black76_implied_vol(float(mids[i]), F, float(strikes[i]), r, tau, "call")

    idx = int(np.searchsorted(strikes, F))
    if idx < strikes.size and strikes[idx] == F:
        return vol(idx)
    if idx == 0:
        return vol(0)
    if idx == strikes.size:
        return vol(strikes.size - 1)
    k_lo, k_hi = strikes[idx - 1], strikes[idx]
    w = (F - k_lo) / (k_hi - k_lo)
    return (1.0 - w) * vol(idx - 1) + w * vol(idx)


def lognormal_rnd(F: float, sigma: float, r: float, tau: float,
                  grid: Optional[np.ndarray] = None) -> ForecastDensity:
    """
    平均 F（マルチンゲール）の対数正規リスク中立密度

    Args:
        F: 先物価格
        sigma: ボラティリティ
        r: 金利（密度には影響しない）
        tau: 満期までの年数
        grid: 対数リターングリッド

    Returns:
        ForecastDensity
    """
    if not sigma > 0.0:
        raise ParameterError(f"lognormal sigma must be > 0, got {sigma}")
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    sd = sigma * math.sqrt(tau)
    z = (grid + 0.5 * sd * sd) / sd
    return ForecastDensity.from_cdf(
        grid, norm.cdf(z), F, pdf=norm.pdf(z) / sd, model="LN-ATM",
        diagnostics={"sigma": sigma, "tau": tau, "r": r},
    )


# ---------------------------------------------------------------------------
# SRE キャリブレーション
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ModelSpace:
    """制約なし空間 ↔ モデルパラメータ"""
    decode: Callable[[np.ndarray], Any]
    encode: Callable[[Any], np.ndarray]
    sample: Callable[[np.random.Generator], Any]


def _log_uniform(rng: np.random.Generator, low: float, high: float) -> float:
    return float(math.exp(rng.uniform(math.log(low), math.log(high))))


def _heston_decode(x: np.ndarray) -> HestonParams:
    return HestonParams(a=math.exp(x[0]), vbar=math.exp(x[1]), eta=math.exp(x[2]),
                        rho=math.tanh(x[3]), v0=math.exp(x[4]))


def _heston_encode(p: HestonParams) -> np.ndarray:
    return np.array([math.log(p.a), math.log(p.vbar), math.log(p.eta), math.atanh(p.rho), math.log(p.v0)])


def _heston_sample(rng: np.random.Generator) -> HestonParams:
    return HestonParams(
        a=_log_uniform(rng, 0.5, 10.0), vbar=_log_uniform(rng, 0.005, 0.5),
        eta=_log_uniform(rng, 0.05, 2.0), rho=float(rng.uniform(-0.95, 0.2)),
        v0=_log_uniform(rng, 0.005, 0.5),
    )


def _bates_decode(x: np.ndarray) -> BatesParams:
    h = _heston_decode(x[:5])
    return BatesParams(h.a, h.vbar, h.eta, h.rho, h.v0,
                       lam=math.exp(x[5]), mu_j=math.exp(x[6]) - 1.0, nu_j=math.exp(x[7]))


def _bates_encode(p: BatesParams) -> np.ndarray:
    tail = [math.log(max(p.lam, 1e-8)), math.log(1.0 + p.mu_j), math.log(max(p.nu_j, 1e-8))]
    return np.concatenate((_heston_encode(p.heston), tail))


def _bates_sample(rng: np.random.Generator) -> BatesParams:
    h = _heston_sample(rng)
    return BatesParams(h.a, h.vbar, h.eta, h.rho, h.v0,
                       lam=float(rng.uniform(0.01, 3.0)), mu_j=float(rng.uniform(-0.3, 0.1)),
                       nu_j=float(rng.uniform(0.01, 0.5)))


def _vg_decode(x: np.ndarray) -> VGParams:
    return VGParams(sigma=math.exp(x[0]), nu=math.exp(x[1]), theta=float(x[2]))


def _vg_encode(p: VGParams) -> np.ndarray:
    return np.array([math.log(p.sigma), math.log(p.nu), p.theta])


def _vg_sample(rng: np.random.Generator) -> VGParams:
    while True:
        p = VGParams(sigma=_log_uniform(rng, 0.05, 0.6), nu=_log_uniform(rng, 0.01, 2.0),
                     theta=float(rng.uniform(-0.5, 0.2)))
        if p.feasible():
            return p


_SPACES = {
    "HESTON": _ModelSpace(_heston_decode, _heston_encode, _heston_sample),
    "BATES": _ModelSpace(_bates_decode, _bates_encode, _bates_sample),
    "VG": _ModelSpace(_vg_decode, _vg_encode, _vg_sample),
}


def model_prices(model: str, params, cross_section: CrossSection, *, adaptive: bool = False) -> np.ndarray:
    """クロスセクションの行使価格でのモデルコール価格"""
    cf = characteristic_function(model, params, cross_section.futures, cross_section.tau)
    return np.atleast_1d(cf_call_price(cf, cross_section.strikes, cross_section.futures,
                                       cross_section.r_eff, cross_section.tau, adaptive=adaptive))


def sre_objective(model: str, params, cross_section: CrossSection) -> float:
    """SRE = Σ |C_i - Ĉ_i| / C_i"""
    fitted = model_prices(model, params, cross_section)
    return float(np.sum(np.abs(cross_section.mids - fitted) / cross_section.mids))


def _initial_guess(model: str, cross_section: CrossSection):
    """ATM ボラティリティに合わせた決定論的初期値"""
    try:
        var = atm_vol(cross_section) ** 2
    except DensityBenchError:
        var = 0.04
    if model == "VG":
        return VGParams(sigma=math.sqrt(var), nu=0.2, theta=-0.1)
    heston = HestonParams(a=2.0, vbar=var, eta=0.5, rho=-0.5, v0=var)
    if model == "BATES":
        return BatesParams(heston.a, heston.vbar, heston.eta, heston.rho, heston.v0,
                           lam=0.3, mu_j=-0.05, nu_j=0.1)
    return heston


def calibrate_sre(model: str, cross_section: CrossSection, *, n_starts: int = 8,
                  maxiter: int = 600, seed: int = 0) -> SreFit:
    """
    相対誤差和 SRE を最小化するパラメータを Nelder-Mead で推定

    VG の 1/ν > θ + σ²/2 を満たさない候補は価格評価せずに棄却する。
    予算内で収束しなくても最良解を converged=False で返す。

    Args:
        model: "HESTON" / "BATES" / "VG"
        cross_section: フィルタ済みクロスセクション
        n_starts: マルチスタート数（1 本目は ATM ボラティリティ由来）
        maxiter: スタートごとの反復上限
        seed: 初期値サンプリングのシード

    Returns:
        SreFit
    """
    if model not in _SPACES:
        raise ParameterError(f"no SRE calibration for model {model}")
    space = _SPACES[model]
    mids = cross_section.mids
    counters = {"evaluations": 0, "rejected": 0}

    def objective(x: np.ndarray) -> float:
        try:
            params = space.decode(x)
        except (ValueError, OverflowError):
            counters["rejected"] += 1
            return _PENALTY
        if model == "VG" and not params.feasible():
            counters["rejected"] += 1
            return _PENALTY
        try:
            params.validate()
            fitted = model_prices(model, params, cross_section)
        except (ParameterError, QuadratureError, FloatingPointError):
            counters["rejected"] += 1
            return _PENALTY
        counters["evaluations"] += 1
        value = float(np.sum(np.abs(mids - fitted) / mids))
        return value if math.isfinite(value) else _PENALTY

    rng = np.random.default_rng(seed)
    starts = [_initial_guess(model, cross_section)]
    starts += [space.sample(rng) for _ in range(max(n_starts - 1, 0))]

    best = None
    converged = False
    for params0 in starts:
        x0 = space.encode(params0)
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-6, "fatol": 1e-8,
                                "initial_simplex": np.vstack([x0, x0 + 0.3 * np.eye(x0.size)])})
        if best is None or res.fun < best.fun:
            best = res
            converged = bool(res.success)

    # 最良点からの再スタート
    for _ in range(2):
        x0 = best.x
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-7, "fatol": 1e-9,
                                "initial_simplex": np.vstack([x0, x0 + 0.05 * np.eye(x0.size)])})
        if res.fun <= best.fun:
            improved = best.fun - res.fun
            best = res
            converged = bool(res.success)
            if improved < 1e-9:
                break

    params = space.decode(best.x)
    fitted = model_prices(model, params, cross_section, adaptive=True)
    errors = np.abs(mids - fitted) / mids
    fit = SreFit(model=model, params=params, sre=float(errors.sum()), n_options=int(mids.size),
                 per_option_errors=errors, converged=converged,
                 n_evaluations=counters["evaluations"], n_rejected=counters["rejected"])
    if not converged:
        logger.warning(f"{model} SRE calibration on {cross_section.obs_date} hit the iteration budget "
                       f"(SRE={fit.sre:.4g})")
    logger.debug(f"{model} SRE fit on {cross_section.obs_date}: SRE={fit.sre:.4g}, "
                 f"{fit.n_evaluations} evaluations, {fit.n_rejected} rejected")
    return fit


# ---------------------------------------------------------------------------
# 密度構築
# ---------------------------------------------------------------------------

def rnd_from_cf(model: str, params, F: float, tau: float,
                grid: Optional[np.ndarray] = None) -> ForecastDensity:
    """
    特性関数の逆変換でリスク中立密度を構築

    Args:
        model: "HESTON" / "BATES" / "VG" / "LOGNORMAL"
        params: モデルパラメータ
        F: 先物価格
        tau: 満期までの年数
        grid: 対数リターングリッド

    Returns:
        ForecastDensity（pdf は中心差分）
    """
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    cf = characteristic_function(model, params, F, tau)
    raw, info = cf_to_cdf_with_info(cf, F * np.exp(grid))
    cdf, total_repair = repair_cdf(raw)
    if total_repair > REPAIR_WARN:
        logger.warning(f"{model} CDF repair total {total_repair:.3g}")
    if info.smoothing > 0.0:
        logger.warning(f"{model} characteristic function smoothed with eps={info.smoothing:.3g}")
    pdf = np.clip(np.gradient(cdf, grid), 0.0, None)
    return ForecastDensity.from_cdf(
        grid, cdf, F, pdf=pdf, model=model,
        diagnostics={"w_max": info.w_max, "smoothing": info.smoothing,
                     "quadrature_error": info.achieved_tolerance, "total_repair": total_repair},
    )


def malz_rnd(cross_section: CrossSection, grid: Optional[np.ndarray] = None) -> ForecastDensity:
    """
    スプライン補間したボラティリティ曲線の有限差分によるリスク中立 CDF

    CDF(x) ≈ 1 + e^{rτ} [C(x + Δ/2) - C(x - Δ/2)] / Δ,  Δ = 0.01·F

    Args:
        cross_section: クロスセクション
        grid: 対数リターングリッド

    Returns:
        ForecastDensity（diagnostics に Δ と修復量）
    """
    grid = make_grid() if grid is None else np.asarray(grid, dtype=float)
    F, r, tau = cross_section.futures, cross_section.r_eff, cross_section.tau
    curve = VolCurve(*implied_vols(cross_section))

    delta = MALZ_STEP * F
    half = 0.5 * delta
    # 評価範囲外は端点の値で打ち切る
    x = np.clip(F * np.exp(grid), MALZ_MESH[0] * F, MALZ_MESH[1] * F)
    upper = black76_price(F, x + half, r, tau, curve(x + half), "call")
    lower = black76_price(F, x - half, r, tau, curve(x - half), "call")
    raw = 1.0 + math.exp(r * tau) * (upper - lower) / delta
    cdf, total_repair = repair_cdf(raw)
    if total_repair > REPAIR_WARN:
        logger.info(f"BL-MALZ CDF repair on {cross_section.obs_date}: total {total_repair:.3g}")
    pdf = np.clip(np.gradient(cdf, grid), 0.0, None)
    return ForecastDensity.from_cdf(
        grid, cdf, F, pdf=pdf, model="BL-MALZ",
        diagnostics={"delta": delta, "total_repair": total_repair, "n_knots": int(curve.strikes.size)},
    )
