"""バックテスト設定（key=value ファイル + 環境変数 + コマンドライン）"""

import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv import dotenv_values

from .error_handler import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "DENSITYBENCH_"
# 結果に影響しないキー（マニフェストのダイジェストから除外）
RESULT_NEUTRAL_KEYS = ("threads", "output_dir", "futures", "rates", "options")


def default_threads() -> int:
    return min(8, os.cpu_count() or 1)


@dataclass
class BacktestConfig:
    """バックテスト設定"""
    futures: Optional[str] = None
    rates: Optional[str] = None
    options: Optional[str] = None
    roster: List[str] = field(default_factory=lambda: ["all"])
    window_6m: int = 126
    window_5y: int = 1260
    n_paths: int = 100_000
    seed: int = 0
    grid_half_width: float = 1.5
    grid_points: int = 3001
    alpha: float = 0.05
    split_date: Optional[date] = date(2007, 1, 1)
    output_dir: str = "reports"
    holidays: List[date] = field(default_factory=list)
    sre_starts: int = 8
    sre_maxiter: int = 600
    garch_starts: int = 5
    threads: int = field(default_factory=default_threads)

    @property
    def windows(self) -> Dict[str, int]:
        return {"6m": self.window_6m, "5y": self.window_5y}

    def to_dict(self) -> Dict[str, Any]:
        """マニフェスト用の決定論的表現"""
        out = asdict(self)
        out["split_date"] = self.split_date.isoformat() if self.split_date else None
        out["holidays"] = [d.isoformat() for d in self.holidays]
        return out

    def result_dict(self) -> Dict[str, Any]:
        """結果を左右する設定のみ（スレッド数・出力先・データのパスを除く。データは内容のダイジェストで別途記録）"""
        out = self.to_dict()
        for key in RESULT_NEUTRAL_KEYS:
            out.pop(key, None)
        return out


def _parse_date(value: str) -> date:
    return date.fromisoformat(value.strip())


def _parse_optional_date(value: str) -> Optional[date]:
    value = value.strip()
    if value.lower() in ("", "none", "off"):
        return None
    return _parse_date(value)


def _parse_dates(value: str) -> List[date]:
    return sorted(_parse_date(v) for v in value.split(",") if v.strip())


def _parse_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _parse_path(value: str) -> Optional[str]:
    value = value.strip()
    return value or None


_PARSERS: Dict[str, Callable[[str], Any]] = {
    "futures": _parse_path,
    "rates": _parse_path,
    "options": _parse_path,
    "roster": _parse_list,
    "window_6m": int,
    "window_5y": int,
    "n_paths": int,
    "seed": int,
    "grid_half_width": float,
    "grid_points": int,
    "alpha": float,
    "split_date": _parse_optional_date,
    "output_dir": str,
    "holidays": _parse_dates,
    "sre_starts": int,
    "sre_maxiter": int,
    "garch_starts": int,
    "threads": int,
}
CONFIG_KEYS: Tuple[str, ...] = tuple(_PARSERS)


def _collect(values: Mapping[str, Any], source: str, problems: List[str]) -> Dict[str, Any]:
    """文字列の設定値を型変換（エラーは problems に追加）"""
    parsed: Dict[str, Any] = {}
    for key, raw in values.items():
        if raw is None:
            continue
        if key not in _PARSERS:
            problems.append(f"{source}: unknown key {key!r}")
            continue
        if not isinstance(raw, str):
            parsed[key] = raw
            continue
        try:
            parsed[key] = _PARSERS[key](raw)
        except ValueError as e:
            problems.append(f"{source}: invalid value for {key}: {raw!r} ({e})")
    return parsed


def _from_environment(environ: Mapping[str, str]) -> Dict[str, str]:
    out = {}
    for key in CONFIG_KEYS:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = environ[name]
    return out


def _validate(config: BacktestConfig, require_data: bool) -> List[str]:
    from ..schemes import parse_roster
    from ..schemes.histmodels import MIN_PATHS, MIN_WINDOW

    problems = []
    try:
        config.roster = parse_roster(config.roster)
    except ConfigError as e:
        problems.extend(e.problems)
    if not config.roster:
        problems.append("roster is empty")
    if config.window_6m < MIN_WINDOW:
        problems.append(f"window_6m must be >= {MIN_WINDOW}, got {config.window_6m}")
    if config.window_5y < config.window_6m:
        problems.append(f"window_5y ({config.window_5y}) is shorter than window_6m ({config.window_6m})")
    if config.n_paths < MIN_PATHS:
        problems.append(f"n_paths must be >= {MIN_PATHS}, got {config.n_paths}")
    if not config.grid_half_width > 0.0:
        problems.append(f"grid_half_width must be > 0, got {config.grid_half_width}")
    if config.grid_points < 101:
        problems.append(f"grid_points must be >= 101, got {config.grid_points}")
    if not 0.0 < config.alpha < 1.0:
        problems.append(f"alpha must lie in (0, 1), got {config.alpha}")
    for key in ("sre_starts", "sre_maxiter", "garch_starts", "threads"):
        if getattr(config, key) < 1:
            problems.append(f"{key} must be >= 1, got {getattr(config, key)}")
    if config.seed < 0:
        problems.append(f"seed must be >= 0, got {config.seed}")
    if require_data and not config.futures:
        problems.append("futures data path is required")
    for key in ("futures", "rates", "options"):
        path = getattr(config, key)
        if path and not Path(path).is_file():
            problems.append(f"{key} file not found: {path}")
    return problems


def load_backtest_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    *,
    environ: Optional[Mapping[str, str]] = None,
    require_data: bool = True
) -> BacktestConfig:
    """
    設定を読み込み・検証

    優先順位はコマンドライン > 設定ファイル > 環境変数（DENSITYBENCH_<KEY>）> 既定値。

    Args:
        path: key=value 形式の設定ファイル
        overrides: コマンドラインで指定された値（None は未指定扱い）
        environ: 環境変数（省略時は os.environ）
        require_data: 先物データのパスを必須とするか

    Returns:
        検証済みの BacktestConfig

    Raises:
        ConfigError: すべての問題を列挙して送出
    """
    problems: List[str] = []
    merged: Dict[str, Any] = {}
    merged.update(_collect(_from_environment(os.environ if environ is None else environ), "environment", problems))

    if path is not None:
        if not Path(path).is_file():
            problems.append(f"config file not found: {path}")
        else:
            values = dotenv_values(path)
            merged.update(_collect({k.strip().lower(): v for k, v in values.items()}, str(path), problems))

    merged.update(_collect(dict(overrides or {}), "command line", problems))

    config = BacktestConfig(**merged)
    problems.extend(_validate(config, require_data))
    if problems:
        raise ConfigError(f"invalid configuration ({len(problems)} problems)", problems=problems)

    logger.info(f"Configuration loaded: {len(config.roster)} schemes, seed={config.seed}, "
                f"n_paths={config.n_paths}, threads={config.threads}")
    return config
