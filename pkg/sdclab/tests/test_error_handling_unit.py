#!/usr/bin/env python3
"""
Unit tests for error handling

Tests error handling functionality including:
- Classification of typed and foreign exceptions
- Exit-code contract
- Bounded error history and statistics
- Error boundary with fallback
"""

import sys
from pathlib import Path
from unittest.mock import Mock

import pytest

# Add parent directory to path for imports
parent_dir = Path(__file__).parent.parent.parent
sys.path.append(str(parent_dir))

from sdclab.components.error_handler import (
    ArtifactError,
    ConfigError,
    ContractViolation,
    ErrorCategory,
    ErrorHandler,
    ErrorInfo,
    ErrorSeverity,
    InvariantViolation,
    NumericalFailure,
    PrecisionUnsupported,
    error_handler,
    with_error_boundary,
)


class TestErrorHandlerCore:
    """Test core error handler functionality"""

    def setup_method(self):
        """Set up test fixtures"""
        self.error_handler = ErrorHandler()

    def test_error_handler_initialization(self):
        """Test error handler initializes correctly"""
        assert self.error_handler._error_history == []
        assert self.error_handler._max_history_size == 100

    def test_handle_error_basic(self):
        """Test basic error handling"""
        error_info = self.error_handler.handle_error(
            ContractViolation("shape mismatch", a_shape=(2, 3)),
            component="tensor",
        )

        assert isinstance(error_info, ErrorInfo)
        assert error_info.category == ErrorCategory.CONTRACT_VIOLATION
        assert error_info.severity == ErrorSeverity.HIGH
        assert error_info.component == "tensor"
        assert error_info.exit_code == 2
        assert "shape mismatch" in error_info.message
        assert error_info.context == {"a_shape": (2, 3)}
        assert "Traceback" in error_info.technical_details

    def test_severity_override(self):
        error_info = self.error_handler.handle_error(ConfigError("seed", "bad"), "cli", ErrorSeverity.LOW)
        assert error_info.severity == ErrorSeverity.LOW

    def test_error_log_management(self):
        """Test error log size management"""
        for i in range(110):
            self.error_handler.handle_error(Exception(f"Error {i}"), component="test")

        assert len(self.error_handler._error_history) == self.error_handler._max_history_size
        assert "Error 109" in self.error_handler.get_error_history(1)[0].message

    def test_get_recent_errors(self):
        """Test retrieving recent errors"""
        for i in range(5):
            self.error_handler.handle_error(Exception(f"Error {i}"), component="test")

        recent_errors = self.error_handler.get_error_history(3)
        assert len(recent_errors) == 3
        assert "Error 4" in recent_errors[2].message
        assert "Error 2" in recent_errors[0].message

    def test_statistics(self):
        assert self.error_handler.get_error_statistics() == {"total_errors": 0}
        self.error_handler.handle_error(ConfigError("steps", "must be >= 1"), component="config")
        self.error_handler.handle_error(NumericalFailure("overflow"), component="model")
        stats = self.error_handler.get_error_statistics()
        assert stats["total_errors"] == 2
        assert stats["by_category"] == {"configuration_error": 1, "numerical_failure": 1}
        assert stats["by_component"] == {"config": 1, "model": 1}

    def test_clear_history(self):
        self.error_handler.handle_error(Exception("x"), component="test")
        self.error_handler.clear_error_history()
        assert self.error_handler.get_error_history() == []


class TestExitCodes:
    """Test the exit-code contract"""

    @pytest.mark.parametrize("error,code", [
        (ConfigError("model.layers", "must be positive"), 1),
        (ArtifactError("missing run directory"), 1),
        (PrecisionUnsupported("k*u too large"), 1),
        (FileNotFoundError("gone"), 1),
        (InvariantViolation("containment broken"), 2),
        (ContractViolation("bad shape"), 2),
        (RuntimeError("surprise"), 2),
        (NumericalFailure("inf in matmul"), 3),
    ])
    def test_exit_code_for(self, error, code):
        assert ErrorHandler().exit_code_for(error) == code

    def test_exception_carries_exit_code(self):
        assert NumericalFailure("x").exit_code == 3
        assert ConfigError("x", "y").exit_code == 1


class TestTypedErrors:
    """Test the exception types"""

    def test_config_error_message(self):
        error = ConfigError("optimizer.lr", "must be > 0")
        assert error.key_path == "optimizer.lr"
        assert str(error) == "optimizer.lr: must be > 0"

    def test_context_in_str(self):
        assert str(ContractViolation("bad", rank=2)) == "bad (rank=2)"

    def test_numerical_failure_location(self):
        error = NumericalFailure("non-finite output", op="matmul", step=4)
        located = error.at(node="unhealthy", step=9)
        assert located.location == {"node": "unhealthy", "step": 4, "op": "matmul"}
        assert isinstance(located, ArithmeticError)

    def test_builtin_bases(self):
        assert isinstance(ContractViolation("x"), ValueError)
        assert isinstance(InvariantViolation("x"), AssertionError)


class TestErrorBoundary:
    """Test the error boundary decorator"""

    def setup_method(self):
        self.error_handler = ErrorHandler()

    def test_success_passes_through(self):
        guarded = self.error_handler.create_error_boundary("cli")(lambda: 0)
        assert guarded() == 0

    def test_failure_returns_exit_code_and_calls_fallback(self):
        fallback = Mock()

        @self.error_handler.create_error_boundary("cli", fallback_function=fallback)
        def run():
            raise NumericalFailure("overflow", step=3)

        assert run() == 3
        fallback.assert_called_once()
        info = fallback.call_args[0][0]
        assert info.category == ErrorCategory.NUMERICAL_FAILURE
        assert info.context == {"step": 3}

    def test_fallback_failure_is_contained(self):
        @self.error_handler.create_error_boundary("cli", fallback_function=Mock(side_effect=OSError("disk")))
        def run():
            raise ConfigError("seed", "bad")

        assert run() == 1
        assert len(self.error_handler.get_error_history()) == 1

    def test_module_boundary_records_in_global_handler(self):
        """The convenience decorator reports through the shared handler"""
        error_handler.clear_error_history()

        @with_error_boundary("cli")
        def run():
            raise InvariantViolation("count outside interval")

        assert run() == 2
        history = error_handler.get_error_history()
        assert len(history) == 1
        assert history[0].component == "cli"
        error_handler.clear_error_history()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
