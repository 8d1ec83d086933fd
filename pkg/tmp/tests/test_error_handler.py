"""エラーハンドリングのテスト"""

import logging

import pytest

from densitybench.utils.error_handler import (
    CalibrationError,
    ConfigError,
    DataValidationError,
    DensityBenchError,
    DegenerateWindowError,
    ErrorCategory,
    ErrorHandler,
    ErrorSeverity,
    InsufficientQuotesError,
    ParameterError,
    ScheduleError,
    exit_code_for,
    handle_errors,
)


class TestHierarchy:
    def test_categories(self):
        assert DataValidationError("x").category == ErrorCategory.DATA
        assert ParameterError("x").category == ErrorCategory.PRICING
        assert CalibrationError("x").category == ErrorCategory.CALIBRATION
        assert ConfigError("x").severity == ErrorSeverity.CRITICAL

    def test_subclasses(self):
        assert issubclass(DegenerateWindowError, CalibrationError)
        assert issubclass(ScheduleError, DataValidationError)
        assert issubclass(InsufficientQuotesError, DataValidationError)

    def test_insufficient_quotes_is_not_fatal(self):
        error = InsufficientQuotesError("only 3 quotes", n_quotes=3)
        assert error.n_quotes == 3
        assert error.severity == ErrorSeverity.MEDIUM

    def test_config_error_collects_problems(self):
        error = ConfigError("invalid", problems=["a", "b"])
        assert error.problems == ["a", "b"]
        assert ConfigError("invalid").problems == []


class TestExitCode:
    @pytest.mark.parametrize("error, code", [
        (ConfigError("bad"), 1),
        (DataValidationError("bad"), 1),
        (ScheduleError("bad"), 1),
        (CalibrationError("bad"), 2),
        (ParameterError("bad"), 2),
        (RuntimeError("bad"), 2),
    ])
    def test_exit_code(self, error, code):
        assert exit_code_for(error) == code


class TestHandleErrorsDecorator:
    def test_wraps_generic_exceptions(self):
        @handle_errors(severity=ErrorSeverity.HIGH, category=ErrorCategory.CALIBRATION)
        def boom():
            raise ZeroDivisionError("division by zero")

        with pytest.raises(DensityBenchError) as excinfo:
            boom()
        assert excinfo.value.category == ErrorCategory.CALIBRATION
        assert isinstance(excinfo.value.original_error, ZeroDivisionError)
        assert "boom" in excinfo.value.message

    def test_passes_through_own_errors(self):
        @handle_errors()
        def fails():
            raise ParameterError("sigma must be positive")

        with pytest.raises(ParameterError):
            fails()

    def test_returns_value(self):
        @handle_errors()
        def ok(x):
            return 2 * x

        assert ok(21) == 42
        assert ok.__name__ == "ok"


class TestErrorHandler:
    """統計とログ出力"""

    def test_counts_by_category(self):
        handler = ErrorHandler()
        assert handler.handle_error(CalibrationError("no convergence"), {"model": "VG"})
        assert handler.handle_error(InsufficientQuotesError("too few"))
        assert handler.handle_error(ValueError("unexpected"))
        stats = handler.get_error_stats()
        assert stats["total_errors"] == 3
        assert stats["error_breakdown"]["calibration"] == 1
        assert stats["error_breakdown"]["data"] == 1
        assert stats["error_breakdown"]["system"] == 1
        assert sum(stats["error_rates"].values()) == pytest.approx(100.0, abs=0.2)

    def test_counts_by_model(self):
        handler = ErrorHandler()
        handler.handle_error(InsufficientQuotesError("too few"), {"model": "VG", "obs_date": "2016-11-18"})
        handler.handle_error(CalibrationError("no convergence"), {"model": "VG"})
        handler.handle_error(CalibrationError("no convergence"), {"model": "BATES"})
        handler.handle_error(ConfigError("bad"), {"command": "backtest"})
        assert handler.get_error_stats()["by_model"] == {"BATES": 1, "VG": 2}

    def test_no_rates_without_errors(self):
        stats = ErrorHandler().get_error_stats()
        assert stats["total_errors"] == 0
        assert "error_rates" not in stats

    def test_log_level_follows_severity(self, caplog):
        handler = ErrorHandler()
        with caplog.at_level(logging.INFO, logger="densitybench.utils.error_handler"):
            handler.handle_error(InsufficientQuotesError("only 4 quotes"), {"obs_date": "2016-11-18"})
            handler.handle_error(CalibrationError("no convergence"))
        levels = [r.levelno for r in caplog.records]
        assert levels == [logging.WARNING, logging.ERROR]
        assert "[DATA] only 4 quotes" in caplog.records[0].getMessage()
        assert "2016-11-18" in caplog.records[0].getMessage()

    def test_reset(self):
        handler = ErrorHandler()
        handler.handle_error(ParameterError("x"))
        handler.reset_error_stats()
        assert handler.get_error_stats()["total_errors"] == 0
