"""共通フィクスチャ"""

import sys
from datetime import date
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, str(Path(__file__).resolve().parents[2]))

from densitybench.utils.density import make_grid
from densitybench.utils.marketdata import CrossSection, PriceHistory
from densitybench.utils.pricing import black76_price


# 15 スキームの全期間の参照値（p 値は %、CRPS は %）
REFERENCE_P_VALUES = {
    "LN-HIS(6m)": (19.25, 3.02, 47.51),
    "BTS(6m)": (12.33, 1.79, 75.07),
    "GARCH-N(6m)": (4.00, 2.32, 32.81),
    "GARCH-t(6m)": (30.24, 4.22, 19.36),
    "GJR-FHS(6m)": (2.81, 50.00, 74.09),
    "LN-HIS(5y)": (70.82, 0.10, 5.84),
    "BTS(5y)": (71.14, 0.10, 22.41),
    "GARCH-N(5y)": (15.77, 16.23, 28.51),
    "GARCH-t(5y)": (0.01, 9.77, 5.19),
    "GJR-FHS(5y)": (29.26, 36.88, 83.68),
    "LN-ATM": (10.66, 12.74, 1.61),
    "HESTON": (8.96, 0.10, 0.80),
    "BATES": (20.45, 50.00, 14.69),
    "VG": (20.04, 50.00, 11.33),
    "BL-MALZ": (0.16, 50.00, 0.84),
}

REFERENCE_EXCESS_LOGLIK = {
    "LN-HIS(6m)": 0.0, "BTS(6m)": 2.34, "GARCH-N(6m)": 12.68, "GARCH-t(6m)": 7.63,
    "GJR-FHS(6m)": 9.73, "LN-HIS(5y)": 7.29, "BTS(5y)": 12.12, "GARCH-N(5y)": 26.29,
    "GARCH-t(5y)": 19.37, "GJR-FHS(5y)": 28.74, "LN-ATM": 21.48, "HESTON": 26.75,
    "BATES": 24.03, "VG": 31.28, "BL-MALZ": 27.69,
}

REFERENCE_EXCESS_CRPS = {
    "LN-HIS(6m)": 0.0, "BTS(6m)": 0.012, "GARCH-N(6m)": -0.034, "GARCH-t(6m)": -0.021,
    "GJR-FHS(6m)": -0.036, "LN-HIS(5y)": -0.214, "BTS(5y)": -0.198, "GARCH-N(5y)": -0.260,
    "GARCH-t(5y)": -0.184, "GJR-FHS(5y)": -0.257, "LN-ATM": -0.259, "HESTON": -0.241,
    "BATES": -0.274, "VG": -0.286, "BL-MALZ": -0.217,
}

# (IFS, consistency, rank, accuracy, rank, errors, rank)
REFERENCE_IFS = {
    "VG": (0.880, 0.867, 3, 0.914, 1, 0.859, 1),
    "GJR-FHS(5y)": (0.864, 0.929, 1, 0.868, 2, 0.793, 5),
    "BATES": (0.817, 0.871, 2, 0.747, 6, 0.833, 2),
    "GARCH-N(5y)": (0.812, 0.823, 4, 0.811, 5, 0.802, 3),
    "LN-ATM": (0.665, 0.534, 11, 0.662, 7, 0.800, 4),
    "BL-MALZ": (0.619, 0.334, 13, 0.846, 3, 0.679, 7),
    "HESTON": (0.612, 0.260, 15, 0.823, 4, 0.751, 6),
    "GARCH-t(5y)": (0.558, 0.521, 12, 0.585, 8, 0.567, 10),
    "BTS(5y)": (0.511, 0.605, 6, 0.312, 10, 0.615, 9),
    "LN-HIS(5y)": (0.476, 0.588, 8, 0.170, 13, 0.670, 8),
    "GJR-FHS(6m)": (0.341, 0.660, 5, 0.234, 11, 0.127, 11),
    "GARCH-t(6m)": (0.280, 0.561, 10, 0.178, 12, 0.103, 13),
    "GARCH-N(6m)": (0.249, 0.291, 14, 0.332, 9, 0.123, 12),
    "BTS(6m)": (0.242, 0.592, 7, 0.075, 14, 0.059, 15),
    "LN-HIS(6m)": (0.232, 0.574, 9, 0.048, 15, 0.072, 14),
}

REFERENCE_CONSISTENT = {"VG", "GJR-FHS(5y)", "BATES", "GARCH-N(5y)"}


@pytest.fixture
def reference_p_fractions():
    return {m: tuple(p / 100.0 for p in v) for m, v in REFERENCE_P_VALUES.items()}


@pytest.fixture
def grid():
    return make_grid()


@pytest.fixture
def coarse_grid():
    return make_grid(1.5, 601)


def make_flat_cross_section(sigma=0.20, F=10000.0, rate=0.0, tau=28 / 365,
                            strikes=None, obs_date=None, expiry=None) -> CrossSection:
    """フラットなボラティリティ曲面のコール換算クロスセクション"""
    if strikes is None:
        strikes = np.arange(8500.0, 11501.0, 250.0)
    strikes = np.asarray(strikes, dtype=float)
    mids = black76_price(F, strikes, rate, tau, sigma, "call")
    return CrossSection(obs_date=obs_date, expiry=expiry, futures=F, rate=rate, tau=tau,
                        strikes=strikes, mids=np.asarray(mids, dtype=float),
                        source_kinds=tuple("P" if k < F else "C" for k in strikes))


@pytest.fixture
def flat_cross_section():
    return make_flat_cross_section()


def make_history(settles, start="2016-01-04", rates=None) -> PriceHistory:
    """営業日ごとの PriceHistory"""
    days = np.busday_offset(np.datetime64(start, "D"), np.arange(len(settles)), roll="forward")
    return PriceHistory(dates=days.astype("datetime64[D]"), settles=np.asarray(settles, dtype=float),
                        rates=None if rates is None else np.asarray(rates, dtype=float))


@pytest.fixture
def random_walk_history():
    rng = np.random.default_rng(11)
    returns = rng.normal(0.0, 0.012, 1499)
    settles = 10000.0 * np.exp(np.concatenate(([0.0], np.cumsum(returns))))
    return make_history(settles)


def d(text: str) -> date:
    return date.fromisoformat(text)
