"""統一エラーハンドリング"""

import functools
import logging
import threading
from collections import Counter
from enum import Enum
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ErrorSeverity(Enum):
    """エラー重要度レベル"""
    LOW = "low"          # ログのみ記録
    MEDIUM = "medium"    # 警告ログ（処理は継続）
    HIGH = "high"        # エラーログ（対象のモデル・サイクルを除外）
    CRITICAL = "critical"  # 実行停止


class ErrorCategory(Enum):
    """エラーカテゴリ"""
    DATA = "data"
    PRICING = "pricing"
    CALIBRATION = "calibration"
    EVALUATION = "evaluation"
    CONFIG = "config"
    IO = "io"
    SYSTEM = "system"


class DensityBenchError(Exception):
    """カスタムエラーベースクラス"""

    def __init__(
        self,
        message: str,
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        category: ErrorCategory = ErrorCategory.SYSTEM,
        context: Optional[Dict[str, Any]] = None,
        original_error: Optional[Exception] = None
    ):
        self.message = message
        self.severity = severity
        self.category = category
        self.context = context or {}
        self.original_error = original_error
        super().__init__(message)


class DataValidationError(DensityBenchError):
    """入力データ検証エラー"""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault("severity", ErrorSeverity.HIGH)
        super().__init__(message, category=ErrorCategory.DATA, **kwargs)


class InsufficientQuotesError(DataValidationError):
    """フィルタ後のオプション数が不足"""

    def __init__(self, message: str, n_quotes: int = 0, **kwargs):
        self.n_quotes = n_quotes
        kwargs.setdefault("severity", ErrorSeverity.MEDIUM)
        super().__init__(message, **kwargs)


class ParameterError(DensityBenchError):
    """モデルパラメータの許容範囲外エラー"""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message,
            severity=ErrorSeverity.HIGH,
            category=ErrorCategory.PRICING,
            **kwargs
        )


class QuadratureError(DensityBenchError):
    """フーリエ積分の収束失敗"""

    def __init__(self, message: str, achieved_tolerance: float = float("nan"), **kwargs):
        self.achieved_tolerance = achieved_tolerance
        super().__init__(
            message,
            severity=ErrorSeverity.HIGH,
            category=ErrorCategory.PRICING,
            **kwargs
        )


class CalibrationError(DensityBenchError):
    """キャリブレーション失敗（最良パラメータを保持）"""

    def __init__(self, message: str, best_params: Optional[Any] = None, **kwargs):
        self.best_params = best_params
        super().__init__(
            message,
            severity=ErrorSeverity.HIGH,
            category=ErrorCategory.CALIBRATION,
            **kwargs
        )


class DegenerateWindowError(CalibrationError):
    """分散ゼロのリターンウィンドウ"""


class EvaluationError(DensityBenchError):
    """評価・検定エラー"""

    def __init__(self, message: str, **kwargs):
        super().__init__(
            message,
            severity=ErrorSeverity.MEDIUM,
            category=ErrorCategory.EVALUATION,
            **kwargs
        )


class ScheduleError(DataValidationError):
    """スケジュール構築エラー"""


class ConfigError(DensityBenchError):
    """設定検証エラー（問題をまとめて保持）"""

    def __init__(self, message: str, problems: Optional[list] = None, **kwargs):
        self.problems = list(problems or [])
        super().__init__(
            message,
            severity=ErrorSeverity.CRITICAL,
            category=ErrorCategory.CONFIG,
            **kwargs
        )


_LOG_LEVELS = {
    ErrorSeverity.CRITICAL: logging.CRITICAL,
    ErrorSeverity.HIGH: logging.ERROR,
    ErrorSeverity.MEDIUM: logging.WARNING,
    ErrorSeverity.LOW: logging.INFO,
}


class ErrorHandler:
    """
    実行中のエラーを集計するハンドラー

    カテゴリ別の件数に加え、コンテキストに "model" があればモデル別の除外件数も数える。
    ワーカースレッドから同時に呼ばれてもよい。
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._by_category: Counter = Counter()
        self._by_model: Counter = Counter()

    def handle_error(self, error: Exception, context: Optional[Dict[str, Any]] = None) -> bool:
        """
        エラーを記録してログに出力

        Args:
            error: 処理するエラー
            context: モデル名・観測日・コマンド名など

        Returns:
            記録できた場合 True
        """
        context = dict(context or {})
        try:
            if isinstance(error, DensityBenchError):
                category = error.category
                merged = {**error.context, **context}
                suffix = f" | Context: {merged}" if merged else ""
                level = _LOG_LEVELS[error.severity]
                logger.log(level, f"[{category.value.upper()}] {error.message}{suffix}")
                if error.original_error is not None:
                    logger.log(level, f"Original error: {error.original_error!r}")
            else:
                category = ErrorCategory.SYSTEM
                suffix = f" | Context: {context}" if context else ""
                logger.error(f"Unhandled error: {error}{suffix}", exc_info=error)
        except Exception as handler_error:
            logger.critical(f"Error handler failed: {handler_error}", exc_info=True)
            return False

        with self._lock:
            self._by_category[category] += 1
            if "model" in context:
                self._by_model[str(context["model"])] += 1
        return True

    def get_error_stats(self) -> Dict[str, Any]:
        """カテゴリ別・モデル別のエラー件数"""
        with self._lock:
            by_category = {c.value: self._by_category[c] for c in ErrorCategory}
            by_model = dict(sorted(self._by_model.items()))
        total = sum(by_category.values())
        stats: Dict[str, Any] = {"total_errors": total, "error_breakdown": by_category, "by_model": by_model}
        if total:
            stats["error_rates"] = {k: round(100.0 * v / total, 1) for k, v in by_category.items() if v}
        return stats

    def reset_error_stats(self):
        with self._lock:
            self._by_category.clear()
            self._by_model.clear()
        logger.info("Error statistics reset")


def exit_code_for(error: Exception) -> int:
    """
    CLI 終了コードを決定

    Args:
        error: 発生したエラー

    Returns:
        検証エラーは 1、実行時エラーは 2
    """
    if isinstance(error, DensityBenchError) and error.category in (
        ErrorCategory.CONFIG, ErrorCategory.DATA
    ):
        return 1
    return 2


# デコレーター関数
def handle_errors(
    severity: ErrorSeverity = ErrorSeverity.HIGH,
    category: ErrorCategory = ErrorCategory.SYSTEM
):
    """
    エラーハンドリングデコレーター

    DensityBenchError 以外の例外を DensityBenchError に変換する。

    Args:
        severity: エラー重要度
        category: エラーカテゴリ
    """
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except DensityBenchError:
                raise  # DensityBenchError はそのまま再発生
            except Exception as e:
                raise DensityBenchError(
                    f"Error in {func.__name__}: {str(e)}",
                    severity=severity,
                    category=category,
                    original_error=e
                ) from e
        return wrapper
    return decorator
