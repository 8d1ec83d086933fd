"""予測スキームのレジストリと共通実行インターフェース"""

import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.density import ForecastDensity
from ..utils.error_handler import ConfigError, InsufficientQuotesError
from ..utils.marketdata import CrossSection, PriceHistory
from . import histmodels, rndmodels

logger = logging.getLogger(__name__)

BENCHMARK = "LN-HIS(6m)"


@dataclass(frozen=True)
class SchemeSpec:
    """予測スキームの定義"""
    name: str
    family: str                     # "historical" / "risk_neutral"
    base_model: str
    window_label: Optional[str] = None

    @property
    def needs_options(self) -> bool:
        return self.family == "risk_neutral"


def _build_registry() -> Dict[str, SchemeSpec]:
    registry = {}
    for base in histmodels.HIST_MODELS:
        for label in ("6m", "5y"):
            name = f"{base}({label})"
            registry[name] = SchemeSpec(name, "historical", base, label)
    for name in ("LN-ATM", "HESTON", "BATES", "VG", "BL-MALZ"):
        registry[name] = SchemeSpec(name, "risk_neutral", name)
    return registry


SCHEMES: Dict[str, SchemeSpec] = _build_registry()
ALL_SCHEMES: Tuple[str, ...] = tuple(SCHEMES)


def parse_roster(value) -> List[str]:
    """
    ロースター指定（カンマ区切りまたはリスト、"all" 可）を検証

    Raises:
        ConfigError: 未知のスキーム名
    """
    if isinstance(value, str):
        items = [v.strip() for v in value.split(",") if v.strip()]
    else:
        items = [str(v).strip() for v in value]
    if items == ["all"]:
        return list(ALL_SCHEMES)
    unknown = [v for v in items if v not in SCHEMES]
    if unknown:
        raise ConfigError(f"unknown schemes in roster: {unknown}",
                          problems=[f"unknown scheme {v}" for v in unknown])
    # 重複除去（順序維持）
    return list(dict.fromkeys(items))


@dataclass
class SchemeInputs:
    """1 サイクル分の事前情報"""
    obs_date: date
    expiry: date
    f_t: float
    tau_business: int
    history: PriceHistory
    cross_section: Optional[CrossSection] = None
    windows: Dict[str, int] = field(default_factory=lambda: {"6m": 126, "5y": 1260})
    n_paths: int = 100_000
    grid: Optional[np.ndarray] = None
    sre_starts: int = 8
    sre_maxiter: int = 600
    garch_starts: int = 5


def run_scheme(spec: SchemeSpec, inputs: SchemeInputs, seed: np.random.SeedSequence) -> Tuple[ForecastDensity, Dict[str, Any]]:
    """
    1 スキームを事前情報のみでキャリブレーションし予測密度を生成

    Args:
        spec: スキーム定義
        inputs: サイクルの入力
        seed: このスキーム・サイクル専用の乱数系列

    Returns:
        (予測密度, 監査用パラメータ辞書)
    """
    audit: Dict[str, Any] = {}
    if spec.family == "historical":
        window = histmodels.ReturnWindow.from_history(
            inputs.history, inputs.obs_date, inputs.windows[spec.window_label], spec.window_label
        )
        audit["window_end"] = str(window.end_date)
        base = spec.base_model
        if base in ("LN-HIS", "BTS"):
            mu, sigma = histmodels.calibrate_lognormal_hist(window)
            params, source = (mu, sigma), (window if base == "BTS" else None)
            audit["params"] = {"mu": mu, "sigma": sigma}
        else:
            variant = {"GARCH-N": "N", "GARCH-t": "t", "GJR-FHS": "GJR"}[base]
            params = histmodels.calibrate_garch(window, variant, n_starts=inputs.garch_starts)
            source = histmodels.scaled_innovations(window, params) if base == "GJR-FHS" else None
            audit["params"] = params.to_dict()
            audit["loglik"] = params.loglik
        paths = histmodels.simulate_paths(base, params, source, inputs.f_t, inputs.tau_business,
                                          inputs.n_paths, np.random.default_rng(seed))
        density = histmodels.empirical_density(paths, inputs.grid)
    else:
        cs = inputs.cross_section
        if cs is None:
            raise InsufficientQuotesError(f"no option cross-section on {inputs.obs_date}")
        if spec.base_model == "LN-ATM":
            sigma = rndmodels.atm_vol(cs)
            density = rndmodels.lognormal_rnd(cs.futures, sigma, cs.r_eff, cs.tau, inputs.grid)
            audit["params"] = {"sigma": sigma}
        elif spec.base_model == "BL-MALZ":
            density = rndmodels.malz_rnd(cs, inputs.grid)
            audit["params"] = {"delta": density.diagnostics["delta"]}
        else:
            seed_int = int(seed.generate_state(1)[0])
            fit = rndmodels.calibrate_sre(spec.base_model, cs, n_starts=inputs.sre_starts,
                                          maxiter=inputs.sre_maxiter, seed=seed_int)
            density = rndmodels.rnd_from_cf(spec.base_model, fit.params, cs.futures, cs.tau, inputs.grid)
            audit.update(fit.summary())
        audit["n_options"] = len(cs)

    density.model = spec.name
    density.obs_date = inputs.obs_date
    density.expiry = inputs.expiry
    return density, audit
