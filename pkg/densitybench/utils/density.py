"""予測密度（ForecastDensity）と共通対数リターングリッド"""

import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

logger = logging.getLogger(__name__)

DEFAULT_HALF_WIDTH = 1.5
DEFAULT_GRID_POINTS = 3001

FAN_QUANTILES = (0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99)


def make_grid(half_width: float = DEFAULT_HALF_WIDTH, n_points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """
    対称な一様対数リターングリッドを生成

    Args:
        half_width: グリッド半幅（対数リターン）
        n_points: 点数（奇数、中央点は厳密に 0）

    Returns:
        グリッド配列
    """
    if n_points < 3 or n_points % 2 == 0:
        raise ValueError(f"grid needs an odd number of points >= 3, got {n_points}")
    half = n_points // 2
    step = half_width / half
    # 整数倍で生成して中央点を厳密に 0 にする
    return np.arange(-half, half + 1) * step


def repair_cdf(cdf: np.ndarray) -> tuple:
    """
    CDF を [0,1] にクランプし isotonic 回帰で単調化

    Args:
        cdf: 修復前の CDF 値

    Returns:
        (修復後 CDF, 修復量の合計)
    """
    raw = np.asarray(cdf, dtype=float)
    clamped = np.clip(raw, 0.0, 1.0)
    if np.all(np.diff(clamped) >= 0.0):
        repaired = clamped
    else:
        repaired = np.clip(isotonic_regression(clamped, increasing=True).x, 0.0, 1.0)
    total_repair = float(np.sum(np.abs(repaired - raw)))
    return repaired, total_repair


@dataclass
class ForecastDensity:
    """
    満期価格の離散化予測分布

    grid は観測日先物価格 f_anchor に対する対数リターン、
    pdf も対数リターン空間の密度。
    """
    grid: np.ndarray
    cdf: np.ndarray
    pdf: np.ndarray
    f_anchor: float
    obs_date: Optional[date] = None
    expiry: Optional[date] = None
    model: str = ""
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_cdf(
        cls,
        grid: np.ndarray,
        cdf: np.ndarray,
        f_anchor: float,
        *,
        pdf: Optional[np.ndarray] = None,
        **kwargs
    ) -> "ForecastDensity":
        """
        CDF から密度を構築（pdf 未指定時は中心差分）

        Args:
            grid: 対数リターングリッド
            cdf: CDF 値（単調化済みであること）
            f_anchor: 観測日先物価格
            pdf: 対数リターン密度（任意）

        Returns:
            ForecastDensity
        """
        if pdf is None:
            pdf = np.clip(np.gradient(cdf, grid), 0.0, None)
        return cls(grid=np.asarray(grid, dtype=float), cdf=np.asarray(cdf, dtype=float),
                   pdf=np.asarray(pdf, dtype=float), f_anchor=float(f_anchor), **kwargs)

    def cdf_at(self, log_return: float) -> float:
        """対数リターンにおける CDF（グリッド外は 0 / 1）"""
        if log_return < self.grid[0]:
            return 0.0
        if log_return > self.grid[-1]:
            return 1.0
        return float(np.interp(log_return, self.grid, self.cdf))

    def pdf_at(self, log_return: float) -> float:
        """対数リターンにおける密度（グリッド外は 0）"""
        if log_return < self.grid[0] or log_return > self.grid[-1]:
            return 0.0
        return float(np.interp(log_return, self.grid, self.pdf))

    def total_mass(self) -> float:
        """pdf の台形積分"""
        return float(np.trapezoid(self.pdf, self.grid))

    def mean_price(self) -> float:
        """満期価格の期待値（CDF から部分積分で計算）"""
        prices = self.f_anchor * np.exp(self.grid)
        # E[X] = x_min + ∫ (1 - CDF(x)) dx （グリッド下限以下の質量は無視）
        return float(prices[0] + np.trapezoid(1.0 - self.cdf, prices))

    def quantiles(self, probs: Sequence[float] = FAN_QUANTILES) -> Dict[str, float]:
        """
        価格分位点を計算

        Args:
            probs: 確率レベル

        Returns:
            "q01" 形式のキーと満期価格の辞書
        """
        out = {}
        # 平坦部分を除いた点で逆補間
        keep = np.concatenate(([True], np.diff(self.cdf) > 0.0))
        cdf_k, grid_k = self.cdf[keep], self.grid[keep]
        for p in probs:
            g = float(np.interp(p, cdf_k, grid_k))
            out[f"q{int(round(p * 100)):02d}"] = self.f_anchor * float(np.exp(g))
        return out

    def check_invariants(self, mass_tol: float = 1e-3) -> List[str]:
        """
        出力密度の不変条件を検査

        Returns:
            違反内容のリスト（空なら問題なし）
        """
        problems = []
        if np.any(np.diff(self.cdf) < 0.0):
            problems.append("cdf is not non-decreasing")
        if self.cdf[0] >= 0.005:
            problems.append(f"cdf at grid minimum is {self.cdf[0]:.4g}")
        if self.cdf[-1] <= 0.995:
            problems.append(f"cdf at grid maximum is {self.cdf[-1]:.4g}")
        if np.any(self.pdf < 0.0):
            problems.append("negative pdf values")
        mass = self.total_mass()
        if abs(mass - 1.0) > mass_tol:
            problems.append(f"pdf integrates to {mass:.6f}")
        return problems

    def summary(self) -> Dict[str, Any]:
        """監査ログ用の要約"""
        return {
            "model": self.model,
            "f_anchor": self.f_anchor,
            "mass": round(self.total_mass(), 10),
            "mean_price": round(self.mean_price(), 8),
            "quantiles": {k: round(v, 8) for k, v in self.quantiles().items()},
        }
