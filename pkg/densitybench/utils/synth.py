"""合成市場データの生成（真の生成過程が既知のデータセット）"""

import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .error_handler import InsufficientQuotesError, ParameterError
from .marketdata import (
    TICK,
    CrossSection,
    OptionQuote,
    PriceHistory,
    RateQuote,
    RateSeries,
    attach_rates,
    call_to_put,
    filter_cross_section,
    option_time,
    third_friday_expiries,
)
from .pricing import HestonParams, black76_price, cf_call_price, characteristic_function

logger = logging.getLogger(__name__)

WORLDS = ("lognormal", "heston", "gjr")
OBS_OFFSET_DAYS = 28
SPREAD_FRACTION = 0.005


@dataclass(frozen=True)
class WorldParams:
    """
    合成世界の生成過程と気配ルール

    lognormal は sigma、heston は a/vbar/eta/rho（初期分散 = vbar）、
    gjr は omega/alpha/beta/gamma/dof を使う。
    """
    world: str = "lognormal"
    sigma: float = 0.20
    a: float = 2.0
    vbar: float = 0.04
    eta: float = 0.4
    rho: float = -0.6
    omega: float = 2e-6
    alpha: float = 0.02
    beta: float = 0.90
    gamma: float = 0.12
    dof: float = 7.0
    f0: float = 10000.0
    rate: float = 0.02
    start: date = date(2000, 1, 3)
    burn_in: int = 1300
    strike_step_frac: float = 0.025
    strike_span: Tuple[float, float] = (0.80, 1.20)
    spread_fraction: float = SPREAD_FRACTION
    mc_paths: int = 20_000

    def validate(self) -> "WorldParams":
        """
        パラメータ検証

        Raises:
            ParameterError: 未知の世界、負の分散など
        """
        if self.world not in WORLDS:
            raise ParameterError(f"unknown synthetic world {self.world!r}; expected one of {WORLDS}")
        if not self.f0 > 0.0 or not 0.0 < self.strike_step_frac < 0.5:
            raise ParameterError(f"f0 must be positive and strike_step_frac in (0, 0.5), "
                                 f"got {self.f0}, {self.strike_step_frac}")
        lo, hi = self.strike_span
        if not 0.0 < lo < 1.0 < hi:
            raise ParameterError(f"strike_span must bracket 1, got {self.strike_span}")
        if self.burn_in < 1 or self.mc_paths < 1 or self.spread_fraction < 0.0:
            raise ParameterError("burn_in, mc_paths and spread_fraction must be positive")
        if self.world == "lognormal" and not self.sigma > 0.0:
            raise ParameterError(f"lognormal world needs sigma > 0, got {self.sigma}")
        if self.world == "heston":
            HestonParams(self.a, self.vbar, self.eta, self.rho, self.vbar).validate()
        if self.world == "gjr":
            if self.omega <= 0.0 or min(self.alpha, self.beta, self.gamma) < 0.0:
                raise ParameterError("GJR world needs omega > 0 and non-negative alpha, beta, gamma")
            if self.alpha + self.beta + 0.5 * self.gamma >= 1.0:
                raise ParameterError("GJR world is not covariance stationary")
            if not self.dof > 2.0:
                raise ParameterError(f"GJR world dof must exceed 2, got {self.dof}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["start"] = self.start.isoformat()
        out["strike_span"] = list(self.strike_span)
        return out


@dataclass
class SyntheticDataset:
    """合成データ一式"""
    world: WorldParams
    seed: int
    history: PriceHistory
    rates: RateSeries
    raw_quotes: Dict[Tuple[date, date], List[OptionQuote]]
    cross_sections: List[CrossSection]
    realizations: Dict[date, float]
    truth: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def expiries(self) -> List[date]:
        return sorted(self.realizations)

    def futures_frame(self) -> pd.DataFrame:
        return self.history.to_frame()

    def rates_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "date": [q.date.isoformat() for q in self.rates.quotes],
            "rate": [q.rate for q in self.rates.quotes],
        })

    def options_frame(self) -> pd.DataFrame:
        rows = []
        for (obs, exp), quotes in sorted(self.raw_quotes.items()):
            for q in quotes:
                rows.append({"obs_date": obs.isoformat(), "expiry": exp.isoformat(),
                             "strike": q.strike, "kind": q.kind, "bid": q.bid, "ask": q.ask})
        return pd.DataFrame(rows, columns=["obs_date", "expiry", "strike", "kind", "bid", "ask"])

    def truth_document(self) -> Dict[str, Any]:
        """truth.json の内容"""
        return {"world": self.world.to_dict(), "seed": self.seed, "cycles": self.truth}


def _calendar(world: WorldParams, n_cycles: int) -> Tuple[pd.DatetimeIndex, List[date]]:
    """営業日カレンダーと満期日（観測日が burn-in 以降になる第 3 金曜日）"""
    burn_end = world.start + timedelta(days=int(math.ceil(world.burn_in * 7 / 5)) + 7)
    horizon = burn_end + timedelta(days=31 * (n_cycles + 2) + OBS_OFFSET_DAYS)
    expiries = [e for e in third_friday_expiries(burn_end, horizon)
                if e - timedelta(days=OBS_OFFSET_DAYS) >= burn_end][:n_cycles]
    days = pd.bdate_range(world.start, expiries[-1])
    return days, expiries


def _simulate_history(world: WorldParams, days: pd.DatetimeIndex,
                      price_rng: np.random.Generator,
                      variance_rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    日次清算値と各日の状態変数（翌日分散）をシミュレーション

    Returns:
        (清算値, 状態変数)  lognormal は σ²、heston は v、gjr は翌日条件付き分散
    """
    n = days.size
    dt = np.diff(days.to_numpy().astype("datetime64[D]")).astype(float) / 365.0
    z = price_rng.standard_normal(n - 1)
    log_f = np.empty(n)
    log_f[0] = math.log(world.f0)
    state = np.empty(n)

    if world.world == "lognormal":
        var = world.sigma ** 2
        log_f[1:] = log_f[0] + np.cumsum(-0.5 * var * dt + world.sigma * np.sqrt(dt) * z)
        state[:] = var
    elif world.world == "heston":
        z_var = variance_rng.standard_normal(n - 1)
        v = world.vbar
        state[0] = v
        for i in range(n - 1):
            # full truncation Euler
            vp = max(v, 0.0)
            log_f[i + 1] = log_f[i] - 0.5 * vp * dt[i] + math.sqrt(vp * dt[i]) * z[i]
            w2 = world.rho * z[i] + math.sqrt(1.0 - world.rho ** 2) * z_var[i]
            v = v + world.a * (world.vbar - vp) * dt[i] + world.eta * math.sqrt(vp * dt[i]) * w2
            state[i + 1] = max(v, 0.0)
        # 決定論的分散（eta=0）では v が vbar のまま
    else:
        shocks = variance_rng.standard_t(world.dof, size=n - 1) * math.sqrt((world.dof - 2.0) / world.dof)
        h = world.omega / (1.0 - world.alpha - world.beta - 0.5 * world.gamma)
        state[0] = h
        for i in range(n - 1):
            e = math.sqrt(h) * shocks[i]
            log_f[i + 1] = log_f[i] + e
            h = world.omega + (world.alpha + world.gamma * (e < 0.0)) * e * e + world.beta * h
            state[i + 1] = h
    return np.exp(log_f), state


def _heston_average_variance(world: WorldParams, v0: float, tau: float) -> float:
    if world.a > 0.0:
        return world.vbar + (v0 - world.vbar) * (1.0 - math.exp(-world.a * tau)) / (world.a * tau)
    return v0


def _model_calls(world: WorldParams, state: float, F: float, strikes: np.ndarray, r_eff: float,
                 tau: float, tau_business: int, mc_rng: np.random.Generator) -> Tuple[np.ndarray, Dict[str, Any]]:
    """真の世界でのコール価格と真のパラメータ"""
    if world.world == "lognormal":
        return black76_price(F, strikes, r_eff, tau, world.sigma, "call"), {"sigma": world.sigma}
    if world.world == "heston":
        v0 = max(state, 1e-8)
        truth = {"a": world.a, "vbar": world.vbar, "eta": world.eta, "rho": world.rho, "v0": v0}
        if world.eta == 0.0:
            sigma = math.sqrt(_heston_average_variance(world, v0, tau))
            return black76_price(F, strikes, r_eff, tau, sigma, "call"), truth
        cf = characteristic_function("HESTON", HestonParams(world.a, world.vbar, world.eta, world.rho, v0), F, tau)
        return np.asarray(cf_call_price(cf, strikes, F, r_eff, tau)), truth

    # GJR: 観測日の条件付き分散から営業日数ぶんモンテカルロ
    shocks = mc_rng.standard_t(world.dof, size=(tau_business, world.mc_paths)) * math.sqrt((world.dof - 2.0) / world.dof)
    h = np.full(world.mc_paths, state)
    total = np.zeros(world.mc_paths)
    for z in shocks:
        e = np.sqrt(h) * z
        total += e
        h = world.omega + (world.alpha + world.gamma * (e < 0.0)) * e * e + world.beta * h
    terminal = F * np.exp(total)
    terminal *= F / terminal.mean()
    payoff = np.maximum(terminal[None, :] - strikes[:, None], 0.0).mean(axis=1)
    truth = {"omega": world.omega, "alpha": world.alpha, "beta": world.beta, "gamma": world.gamma,
             "dof": world.dof, "sigma2_0": float(state), "tau_business": int(tau_business)}
    return math.exp(-r_eff * tau) * payoff, truth


def strike_step(F: float, frac: float) -> float:
    """
    行使価格の刻み幅

    frac * F 以下で最大の「きりのよい」値（1, 2, 2.5, 5 × 10^k）を返す。
    先物価格の水準によらず、ストライク帯に同程度の本数が並ぶ。

    Args:
        F: 先物価格
        frac: 先物価格に対する刻み幅の目安

    Returns:
        刻み幅
    """
    raw = frac * F
    scale = 10.0 ** math.floor(math.log10(raw))
    for mantissa in (5.0, 2.5, 2.0, 1.0):
        if mantissa * scale <= raw * (1.0 + 1e-12):
            return mantissa * scale
    return scale


def _quote(world: WorldParams, strikes: np.ndarray, calls: np.ndarray, F: float,
           r_eff: float, tau: float) -> List[OptionQuote]:
    """コール・プット両方の気配（仲値 = モデル価格、1 ティック未満は気配なし）"""
    quotes = []
    for K, c in zip(strikes, calls):
        p = call_to_put(float(c), F, float(K), r_eff, tau)
        for kind, mid in (("C", float(c)), ("P", p)):
            if mid < TICK:
                continue
            half = max(world.spread_fraction * mid, 0.5 * TICK)
            quotes.append(OptionQuote(strike=float(K), kind=kind, bid=mid - half, ask=mid + half))
    return quotes


def synth_generate(world_params: WorldParams, n_cycles: int, seed: int) -> SyntheticDataset:
    """
    合成データセットを生成

    同じ (world_params, n_cycles, seed) からは常に同一の結果を返す。
    価格・分散・モンテカルロはそれぞれ独立した乱数系列を使う。

    Args:
        world_params: 生成過程と気配ルール
        n_cycles: 月次サイクル数
        seed: 乱数シード

    Returns:
        SyntheticDataset

    Raises:
        ParameterError: 不正な世界パラメータまたはサイクル数
    """
    world = world_params.validate()
    if n_cycles < 1:
        raise ParameterError(f"n_cycles must be >= 1, got {n_cycles}")

    price_ss, variance_ss, mc_ss = np.random.SeedSequence(seed).spawn(3)
    price_rng = np.random.default_rng(price_ss)
    variance_rng = np.random.default_rng(variance_ss)
    mc_rng = np.random.default_rng(mc_ss)

    days, expiries = _calendar(world, n_cycles)
    settles, states = _simulate_history(world, days, price_rng, variance_rng)
    day_keys = days.to_numpy().astype("datetime64[D]")
    rates = RateSeries([RateQuote(days[0].date(), world.rate)])
    history = attach_rates(PriceHistory(dates=day_keys, settles=settles), rates)

    raw_quotes: Dict[Tuple[date, date], List[OptionQuote]] = {}
    sections: List[CrossSection] = []
    realizations: Dict[date, float] = {}
    truth: List[Dict[str, Any]] = []
    lo, hi = world.strike_span

    for expiry in expiries:
        obs = expiry - timedelta(days=OBS_OFFSET_DAYS)
        i_obs = int(np.searchsorted(day_keys, np.datetime64(obs, "D")))
        i_exp = int(np.searchsorted(day_keys, np.datetime64(expiry, "D")))
        F = float(settles[i_obs])
        tau, r_eff = option_time(obs, expiry, world.rate)
        tau_business = i_exp - i_obs
        step = strike_step(F, world.strike_step_frac)
        strikes = np.arange(math.ceil(lo * F / step), math.floor(hi * F / step) + 1) * step
        calls, params = _model_calls(world, float(states[i_obs]), F, strikes, r_eff, tau, tau_business, mc_rng)
        quotes = _quote(world, strikes, calls, F, r_eff, tau)
        raw_quotes[(obs, expiry)] = quotes
        try:
            sections.append(filter_cross_section(quotes, F, r_eff, tau, obs_date=obs, expiry=expiry,
                                                 rate=world.rate))
        except InsufficientQuotesError as e:
            logger.warning(f"Synthetic cross-section {obs} skipped: {e.message}")
        realizations[expiry] = float(settles[i_exp])
        truth.append({
            "obs_date": obs.isoformat(),
            "expiry": expiry.isoformat(),
            "f_t": F,
            "realization": float(settles[i_exp]),
            "tau": tau,
            "tau_business": tau_business,
            "r_eff": r_eff,
            "params": params,
        })

    logger.info(f"Generated {world.world} world: {len(days)} days, {n_cycles} cycles, "
                f"{len(sections)} cross-sections (seed {seed})")
    return SyntheticDataset(world=world, seed=int(seed), history=history, rates=rates,
                            raw_quotes=raw_quotes, cross_sections=sections,
                            realizations=realizations, truth=truth)
