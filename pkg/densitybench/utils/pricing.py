"""オプション価格・特性関数・フーリエ逆変換"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .error_handler import ParameterError, QuadratureError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# フーリエ積分の設定
W_CAP = 2000.0          # 周波数の上限
CF_TAIL_TOL = 1e-10     # |ψ(w)/w| の打ち切り閾値
QUAD_TOL = 1e-8         # パネル細分化の収束判定
_GL_ORDER = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)
_CHUNK_ELEMENTS = 2_000_000

IV_LOWER = 1e-6
IV_UPPER = 5.0


def _normalize_kind(kind: str) -> str:
    """オプション種別を 'call' / 'put' に正規化"""
    k = str(kind).strip().lower()
    if k in ("c", "call"):
        return "call"
    if k in ("p", "put"):
        return "put"
    raise ValueError(f"unknown option kind: {kind!r}")


# ---------------------------------------------------------------------------
# Black-76
# ---------------------------------------------------------------------------

def black76_price(F: ArrayLike, K: ArrayLike, r: float, tau: float,
                  sigma: ArrayLike, kind: str = "call") -> ArrayLike:
    """
    先物オプションの Black-76 価格

    Args:
        F: 先物価格
        K: 権利行使価格
        r: 金利（連続複利、tau と同じ年換算）
        tau: 満期までの年数
        sigma: ボラティリティ
        kind: "call" / "put"

    Returns:
        割引後オプション価格（sigma=0 は割引本源的価値）
    """
    kind = _normalize_kind(kind)
    F_arr, K_arr, s_arr = np.broadcast_arrays(
        np.asarray(F, dtype=float), np.asarray(K, dtype=float), np.asarray(sigma, dtype=float)
    )
    df = math.exp(-r * tau)
    sd = s_arr * math.sqrt(max(tau, 0.0))

    with np.errstate(divide="ignore", invalid="ignore"):
        safe_sd = np.where(sd > 0.0, sd, 1.0)
        d1 = (np.log(F_arr / K_arr) + 0.5 * sd * sd) / safe_sd
        d2 = d1 - sd
        if kind == "call":
            priced = df * (F_arr * norm.cdf(d1) - K_arr * norm.cdf(d2))
            intrinsic = df * np.maximum(F_arr - K_arr, 0.0)
        else:
            priced = df * (K_arr * norm.cdf(-d2) - F_arr * norm.cdf(-d1))
            intrinsic = df * np.maximum(K_arr - F_arr, 0.0)
    out = np.where(sd > 0.0, priced, intrinsic)
    out = np.where(K_arr <= 0.0, df * F_arr if kind == "call" else 0.0, out)
    if out.ndim == 0:
        return float(out)
    return out


def black76_implied_vol(price: float, F: float, K: float, r: float, tau: float,
                        kind: str = "call") -> float:
    """
    Black-76 インプライドボラティリティ（[1e-6, 5] の囲い込み求根）

    Args:
        price: オプション価格
        F: 先物価格
        K: 権利行使価格
        r: 金利
        tau: 満期までの年数
        kind: "call" / "put"

    Returns:
        インプライドボラティリティ

    Raises:
        ParameterError: 価格が無裁定範囲外
    """
    kind = _normalize_kind(kind)
    df = math.exp(-r * tau)
    if kind == "call":
        lower, upper = df * max(F - K, 0.0), df * F
    else:
        lower, upper = df * max(K - F, 0.0), df * K

    slack = 1e-12 * max(F, 1.0)
    if not math.isfinite(price) or price < lower - slack:
        raise ParameterError(
            f"price {price} below discounted intrinsic {lower}",
            context={"violated_bound": "lower", "bound": lower, "price": price, "strike": K}
        )
    if price > upper + slack:
        raise ParameterError(
            f"price {price} above upper bound {upper}",
            context={"violated_bound": "upper", "bound": upper, "price": price, "strike": K}
        )

    def objective(sig: float) -> float:
        return black76_price(F, K, r, tau, sig, kind) - price

    f_low = objective(IV_LOWER)
    if f_low >= 0.0:
        return IV_LOWER
    f_high = objective(IV_UPPER)
    if f_high <= 0.0:
        logger.warning(f"Implied vol above bracket for K={K}, returning {IV_UPPER}")
        return IV_UPPER
    return float(brentq(objective, IV_LOWER, IV_UPPER, xtol=1e-15, rtol=1e-14, maxiter=300))


# ---------------------------------------------------------------------------
# モデルパラメータ
# ---------------------------------------------------------------------------

def _check_finite(params) -> None:
    for f in fields(params):
        value = getattr(params, f.name)
        if not math.isfinite(value):
            raise ParameterError(f"{type(params).__name__}.{f.name} is not finite: {value}")


@dataclass(frozen=True)
class HestonParams:
    """Heston 確率ボラティリティモデルのパラメータ"""
    a: float      # 平均回帰速度
    vbar: float   # 長期分散
    eta: float    # ボラティリティのボラティリティ
    rho: float    # 相関
    v0: float     # 初期分散

    def validate(self) -> "HestonParams":
        _check_finite(self)
        if self.a < 0.0:
            raise ParameterError(f"Heston a must be >= 0, got {self.a}")
        if self.vbar <= 0.0 or self.v0 <= 0.0:
            raise ParameterError(f"Heston variances must be > 0, got vbar={self.vbar}, v0={self.v0}")
        if self.eta < 0.0:
            raise ParameterError(f"Heston eta must be >= 0, got {self.eta}")
        if not -1.0 < self.rho < 1.0:
            raise ParameterError(f"Heston rho must lie in (-1, 1), got {self.rho}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class BatesParams:
    """Bates（Heston + 対数正規ジャンプ）のパラメータ"""
    a: float
    vbar: float
    eta: float
    rho: float
    v0: float
    lam: float    # ジャンプ強度（年率）
    mu_j: float   # 平均ジャンプサイズ E[J]
    nu_j: float   # 対数ジャンプの標準偏差

    @property
    def heston(self) -> HestonParams:
        return HestonParams(self.a, self.vbar, self.eta, self.rho, self.v0)

    def validate(self) -> "BatesParams":
        _check_finite(self)
        self.heston.validate()
        if self.lam < 0.0 or self.nu_j < 0.0:
            raise ParameterError(f"Bates lambda and nu_j must be >= 0, got {self.lam}, {self.nu_j}")
        if self.mu_j <= -1.0:
            raise ParameterError(f"Bates mean jump must exceed -100%, got {self.mu_j}")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class VGParams:
    """Variance Gamma のパラメータ"""
    sigma: float
    nu: float
    theta: float

    def feasible(self) -> bool:
        """1/ν > θ + σ²/2 （マルチンゲール補正が定義できる条件）"""
        return self.sigma > 0.0 and self.nu > 0.0 and 1.0 / self.nu > self.theta + 0.5 * self.sigma ** 2

    def validate(self) -> "VGParams":
        _check_finite(self)
        if self.sigma <= 0.0 or self.nu <= 0.0:
            raise ParameterError(f"VG sigma and nu must be > 0, got {self.sigma}, {self.nu}")
        if not self.feasible():
            raise ParameterError(
                f"VG constraint 1/nu > theta + sigma^2/2 violated: {1.0 / self.nu} <= "
                f"{self.theta + 0.5 * self.sigma ** 2}"
            )
        return self

    @property
    def omega(self) -> float:
        """マルチンゲール補正 ω = ln(1 - θν - σ²ν/2)/ν"""
        return math.log(1.0 - self.theta * self.nu - 0.5 * self.sigma ** 2 * self.nu) / self.nu

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# 特性関数 ψ_{ln F_{t*}}(w)
# ---------------------------------------------------------------------------

def cf_lognormal(w: ArrayLike, sigma: float, F: float, tau: float) -> np.ndarray:
    """対数正規（マルチンゲール）の特性関数"""
    w = np.asarray(w, dtype=complex)
    var = sigma * sigma * tau
    return np.exp(1j * w * math.log(F) - 0.5 * (1j * w + w * w) * var)


def cf_heston(w: ArrayLike, params: HestonParams, F: float, tau: float) -> np.ndarray:
    """
    Heston 特性関数（分岐切断のない定式化）

    Args:
        w: 周波数（複素数可）
        params: Heston パラメータ
        F: 観測日先物価格
        tau: 満期までの年数

    Returns:
        ψ(w)
    """
    params.validate()
    w = np.asarray(w, dtype=complex)
    a, vbar, eta, rho, v0 = params.a, params.vbar, params.eta, params.rho, params.v0
    log_f = math.log(F)

    if eta < 1e-10:
        # 分散は決定論的: 積分分散で対数正規
        if a > 0.0:
            integrated = vbar * tau + (v0 - vbar) * (1.0 - math.exp(-a * tau)) / a
        else:
            integrated = v0 * tau
        return np.exp(1j * w * log_f - 0.5 * (1j * w + w * w) * integrated)

    iw = 1j * w
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        beta = a - rho * eta * iw
        d = np.sqrt(beta * beta + eta * eta * (iw + w * w))
        g = (beta - d) / (beta + d)
        e = np.exp(-d * tau)
        c_term = (a * vbar / eta ** 2) * ((beta - d) * tau - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
        d_term = ((beta - d) / eta ** 2) * ((1.0 - e) / (1.0 - g * e))
        out = np.exp(iw * log_f + c_term + d_term * v0)
    # w = 0 は 0/0 になり得るので正規化値を直接与える
    out = np.where(w == 0, 1.0 + 0.0j, out)
    return out


def cf_bates(w: ArrayLike, params: BatesParams, F: float, tau: float) -> np.ndarray:
    """Bates 特性関数（ジャンプ補償 -λμ_J 込み）"""
    params.validate()
    w = np.asarray(w, dtype=complex)
    base = cf_heston(w, params.heston, F, tau)
    if params.lam == 0.0:
        return base
    m = math.log1p(params.mu_j) - 0.5 * params.nu_j ** 2
    jump_cf = np.exp(1j * w * m - 0.5 * w * w * params.nu_j ** 2)
    jump = params.lam * tau * (jump_cf - 1.0) - 1j * w * params.lam * params.mu_j * tau
    return base * np.exp(jump)


def cf_vg(w: ArrayLike, params: VGParams, F: float, tau: float) -> np.ndarray:
    """Variance Gamma 特性関数（ω 補正込み）"""
    params.validate()
    w = np.asarray(w, dtype=complex)
    sigma, nu, theta = params.sigma, params.nu, params.theta
    base = 1.0 - 1j * w * theta * nu + 0.5 * sigma ** 2 * nu * w * w
    return np.exp(1j * w * (math.log(F) + params.omega * tau) - (tau / nu) * np.log(base))


_CF_BY_MODEL = {
    "HESTON": (HestonParams, cf_heston),
    "BATES": (BatesParams, cf_bates),
    "VG": (VGParams, cf_vg),
}


@dataclass(frozen=True)
class CharacteristicFunction:
    """ψ_{ln F_{t*}} の評価器（不変オブジェクト）"""
    model: str
    params: object
    F: float
    tau: float

    def __post_init__(self):
        if self.model == "LOGNORMAL":
            if not (isinstance(self.params, float) and self.params > 0.0):
                raise ParameterError(f"lognormal sigma must be > 0, got {self.params}")
        else:
            if self.model not in _CF_BY_MODEL:
                raise ParameterError(f"no characteristic function for model {self.model}")
            self.params.validate()
        if self.F <= 0.0 or self.tau <= 0.0:
            raise ParameterError(f"F and tau must be > 0, got F={self.F}, tau={self.tau}")

    def __call__(self, w: ArrayLike) -> np.ndarray:
        if self.model == "LOGNORMAL":
            return cf_lognormal(w, self.params, self.F, self.tau)
        return _CF_BY_MODEL[self.model][1](w, self.params, self.F, self.tau)


def characteristic_function(model: str, params, F: float, tau: float) -> CharacteristicFunction:
    """モデル名から特性関数を構築"""
    if model == "LOGNORMAL":
        params = float(params)
    return CharacteristicFunction(model=model, params=params, F=float(F), tau=float(tau))


# ---------------------------------------------------------------------------
# フーリエ逆変換（Gauss-Legendre パネル）
# ---------------------------------------------------------------------------

def _gaussian_factor(w: np.ndarray, eps: float) -> np.ndarray:
    """N(-ε²/2, ε²) の特性関数（マルチンゲールを保つ平滑化）"""
    if eps == 0.0:
        return np.ones_like(w, dtype=complex)
    return np.exp(-0.5j * w * eps * eps - 0.5 * eps * eps * w * w)


def _frequency_cutoff(cf: Callable) -> Tuple[float, float]:
    """
    積分上限 w_max と平滑化幅を決定

    Returns:
        (w_max, eps)  eps > 0 は上限までに減衰しない場合のみ
    """
    w_scan = np.geomspace(0.5, W_CAP, 600)
    mag = np.abs(cf(w_scan)) / w_scan
    above = np.nonzero(~(mag < CF_TAIL_TOL))[0]
    if above.size == 0:
        return 1.0, 0.0
    last = int(above[-1])
    if last < w_scan.size - 1:
        return float(w_scan[last + 1]), 0.0
    tail = float(np.max(mag[-50:]))
    eps = math.sqrt(2.0 * math.log(tail / CF_TAIL_TOL)) / W_CAP
    return W_CAP, eps


def _nodes(w_max: float, panel_width: float) -> Tuple[np.ndarray, np.ndarray]:
    """[0, w_max] 上の合成 Gauss-Legendre 節点と重み"""
    n_panels = max(1, int(math.ceil(w_max / panel_width)))
    edges = np.linspace(0.0, w_max, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    weights = (half[:, None] * _GL_W[None, :]).ravel()
    return nodes, weights


def _sine_transform(y: np.ndarray, nodes: np.ndarray, weights: np.ndarray,
                    psi: np.ndarray) -> np.ndarray:
    """Σ_k W_k Im(e^{-i w_k y} ψ_k) / w_k をチャンク単位で計算"""
    a = weights * psi.imag / nodes
    b = weights * psi.real / nodes
    out = np.empty(y.size)
    step = max(1, _CHUNK_ELEMENTS // max(nodes.size, 1))
    for start in range(0, y.size, step):
        block = np.outer(y[start:start + step], nodes)
        out[start:start + step] = np.cos(block) @ a - np.sin(block) @ b
    return out


def _gil_pelaez(shifted_cf: Callable, y: np.ndarray, w_max: float,
                adaptive: bool = True) -> Tuple[np.ndarray, float]:
    """
    CDF(y) = 1/2 - (1/π) ∫ Im[e^{-iwy} ψ(w)]/w dw をパネル細分化で評価

    Args:
        shifted_cf: 中心化済みの特性関数
        y: 評価点（中心化済み対数価格）
        w_max: 積分上限
        adaptive: False なら初期パネル幅の 1 回評価のみ（誤差は nan）

    Returns:
        (CDF 値, 達成誤差)
    """
    spread = float(np.max(np.abs(y))) if y.size else 0.0
    width = min(2.0, 6.0 / (spread + 1.0))

    nodes, weights = _nodes(w_max, width)
    coarse = 0.5 - _sine_transform(y, nodes, weights, shifted_cf(nodes)) / math.pi
    if not adaptive:
        return coarse, float("nan")
    err = float("inf")
    for _ in range(4):
        width *= 0.5
        nodes, weights = _nodes(w_max, width)
        fine = 0.5 - _sine_transform(y, nodes, weights, shifted_cf(nodes)) / math.pi
        err = float(np.max(np.abs(fine - coarse))) if y.size else 0.0
        if err <= QUAD_TOL:
            return fine, err
        coarse = fine
    raise QuadratureError(
        f"Fourier quadrature did not converge (achieved {err:.3g})",
        achieved_tolerance=err,
        context={"w_max": w_max, "panel_width": width}
    )


@dataclass
class InversionInfo:
    """フーリエ逆変換の診断情報"""
    w_max: float
    smoothing: float
    achieved_tolerance: float
    total_repair: float = 0.0


def cf_to_cdf_with_info(cf: CharacteristicFunction, x: ArrayLike) -> Tuple[np.ndarray, InversionInfo]:
    """
    特性関数から価格 x における CDF を計算（診断情報付き、クランプのみ）

    Args:
        cf: 特性関数
        x: 価格（> 0）

    Returns:
        (CDF 値, 診断情報)
    """
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(x_arr <= 0.0):
        raise ParameterError("cf_to_cdf needs strictly positive prices")
    log_f = math.log(cf.F)
    w_max, eps = _frequency_cutoff(cf)
    if eps > 0.0:
        logger.debug(f"{cf.model} CF tail above tolerance at cap, smoothing eps={eps:.3g}")

    def shifted(w):
        return cf(w) * _gaussian_factor(w, eps) * np.exp(-1j * w * log_f)

    cdf, err = _gil_pelaez(shifted, np.log(x_arr) - log_f, w_max)
    return np.clip(cdf, 0.0, 1.0), InversionInfo(w_max=w_max, smoothing=eps, achieved_tolerance=err)


def cf_to_cdf(cf: CharacteristicFunction, x: ArrayLike) -> ArrayLike:
    """
    特性関数から CDF を計算

    スカラー入力はクランプのみ、配列入力は単調化（isotonic 修復）まで行う。

    Args:
        cf: 特性関数
        x: 価格（スカラーまたは昇順配列）

    Returns:
        CDF 値
    """
    from .density import repair_cdf

    cdf, _ = cf_to_cdf_with_info(cf, x)
    if np.ndim(x) == 0:
        return float(cdf[0])
    repaired, _ = repair_cdf(cdf)
    return repaired


def cf_call_price(cf: CharacteristicFunction, K: ArrayLike, F: float, r: float, tau: float,
                  *, adaptive: bool = True) -> ArrayLike:
    """
    特性関数からコール価格を計算

    C = e^{-rτ} [F (1 - Q1(K)) - K (1 - Q2(K))]
    Q2 は価格測度の CDF、Q1 は ψ(w - i)/F による株式測度の CDF。

    Args:
        cf: 特性関数
        K: 権利行使価格（スカラーまたは配列）
        F: 先物価格
        r: 金利
        tau: 満期までの年数
        adaptive: パネル細分化による収束確認（キャリブレーション中は省略）

    Returns:
        コール価格
    """
    K_arr = np.atleast_1d(np.asarray(K, dtype=float))
    if np.any(K_arr <= 0.0):
        raise ParameterError("cf_call_price needs strictly positive strikes")
    log_f = math.log(F)
    w_max, eps = _frequency_cutoff(cf)

    def shifted_q2(w):
        return cf(w) * _gaussian_factor(w, eps) * np.exp(-1j * w * log_f)

    def shifted_q1(w):
        w_c = np.asarray(w, dtype=complex) - 1j
        return cf(w_c) * _gaussian_factor(w_c, eps) / F * np.exp(-1j * np.asarray(w) * log_f)

    y = np.log(K_arr) - log_f
    q2, _ = _gil_pelaez(shifted_q2, y, w_max, adaptive)
    q1, _ = _gil_pelaez(shifted_q1, y, w_max, adaptive)
    prices = math.exp(-r * tau) * (F * (1.0 - q1) - K_arr * (1.0 - q2))
    prices = np.maximum(prices, 0.0)
    if np.ndim(K) == 0:
        return float(prices[0])
    return prices
