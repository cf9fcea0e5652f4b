#!/usr/bin/env python3
"""
Error Handler Component

Provides the exception hierarchy, centralized error logging and the exit-code
contract for sdclab. Kernels and protocols raise the typed exceptions defined
here; the CLI wraps every run in an error boundary that turns an escaping
exception into its exit code.

Key responsibilities:
- Typed exceptions carrying an error category and structured context
- Centralized error logging with a bounded history
- Error statistics for the run manifest
- Error boundary decorator mapping failures to exit codes
"""

import logging
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from functools import wraps
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class ErrorSeverity(Enum):
    """Error severity levels"""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class ErrorCategory(Enum):
    """Error categories; each one maps to a process exit code"""
    CONTRACT_VIOLATION = "contract_violation"
    NUMERICAL_FAILURE = "numerical_failure"
    PRECISION_UNSUPPORTED = "precision_unsupported"
    CONFIGURATION_ERROR = "configuration_error"
    INVARIANT_VIOLATION = "invariant_violation"
    ARTIFACT_ERROR = "artifact_error"
    UNKNOWN_ERROR = "unknown_error"


EXIT_CODES: Dict[ErrorCategory, int] = {
    ErrorCategory.CONFIGURATION_ERROR: 1,
    ErrorCategory.ARTIFACT_ERROR: 1,
    ErrorCategory.PRECISION_UNSUPPORTED: 1,
    ErrorCategory.INVARIANT_VIOLATION: 2,
    ErrorCategory.CONTRACT_VIOLATION: 2,
    ErrorCategory.UNKNOWN_ERROR: 2,
    ErrorCategory.NUMERICAL_FAILURE: 3,
}

_DEFAULT_SEVERITY: Dict[ErrorCategory, ErrorSeverity] = {
    ErrorCategory.CONFIGURATION_ERROR: ErrorSeverity.MEDIUM,
    ErrorCategory.ARTIFACT_ERROR: ErrorSeverity.MEDIUM,
    ErrorCategory.PRECISION_UNSUPPORTED: ErrorSeverity.MEDIUM,
    ErrorCategory.CONTRACT_VIOLATION: ErrorSeverity.HIGH,
    ErrorCategory.INVARIANT_VIOLATION: ErrorSeverity.CRITICAL,
    ErrorCategory.NUMERICAL_FAILURE: ErrorSeverity.HIGH,
    ErrorCategory.UNKNOWN_ERROR: ErrorSeverity.CRITICAL,
}


class SdcLabError(Exception):
    """Base class of every error raised on purpose by sdclab"""

    category = ErrorCategory.UNKNOWN_ERROR

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = dict(context)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class ContractViolation(SdcLabError, ValueError):
    """A precondition of an operation does not hold (shapes, ranges, missing inputs)"""

    category = ErrorCategory.CONTRACT_VIOLATION


class NumericalFailure(SdcLabError, ArithmeticError):
    """A kernel, loss or update produced a non-finite value"""

    category = ErrorCategory.NUMERICAL_FAILURE

    @property
    def location(self) -> Dict[str, Any]:
        return self.context

    def at(self, **location: Any) -> "NumericalFailure":
        """Return a copy with extra location keys; existing keys win."""
        merged = dict(location)
        merged.update(self.context)
        return NumericalFailure(self.message, **merged)


class PrecisionUnsupported(SdcLabError):
    """The ABFT datatype gate rejected the requested precision"""

    category = ErrorCategory.PRECISION_UNSUPPORTED


class ConfigError(SdcLabError):
    """Invalid, missing or unknown configuration key"""

    category = ErrorCategory.CONFIGURATION_ERROR

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class InvariantViolation(SdcLabError, AssertionError):
    """A runtime self-check detected a broken invariant"""

    category = ErrorCategory.INVARIANT_VIOLATION


class ArtifactError(SdcLabError):
    """A run directory or artifact file is missing or unreadable"""

    category = ErrorCategory.ARTIFACT_ERROR


@dataclass
class ErrorInfo:
    """Structured error information"""
    category: ErrorCategory
    severity: ErrorSeverity
    message: str
    exit_code: int
    technical_details: Optional[str] = None
    timestamp: datetime = field(default_factory=datetime.now)
    component: Optional[str] = None
    context: Dict[str, Any] = field(default_factory=dict)


class ErrorHandler:
    """
    Centralized error handling for sdclab runs.

    Classifies exceptions, logs them at a level matching their severity and
    keeps a bounded history that the run manifest summarizes.
    """

    def __init__(self, max_history_size: int = 100):
        self.logger = logging.getLogger(__name__)
        self._error_history: List[ErrorInfo] = []
        self._max_history_size = max_history_size

    def classify(self, error: BaseException) -> ErrorCategory:
        if isinstance(error, SdcLabError):
            return error.category
        if isinstance(error, (FileNotFoundError, PermissionError, IsADirectoryError)):
            return ErrorCategory.ARTIFACT_ERROR
        return ErrorCategory.UNKNOWN_ERROR

    def handle_error(self,
                     error: BaseException,
                     component: str,
                     severity: Optional[ErrorSeverity] = None) -> ErrorInfo:
        """
        Handle an error: classify, log and record it

        Args:
            error: The exception that occurred
            component: Component where the error occurred
            severity: Override of the category's default severity

        Returns:
            ErrorInfo: Structured error information
        """
        category = self.classify(error)
        error_info = ErrorInfo(
            category=category,
            severity=severity or _DEFAULT_SEVERITY[category],
            message=str(error),
            exit_code=EXIT_CODES[category],
            technical_details=self._get_technical_details(error),
            component=component,
            context=dict(getattr(error, "context", {}) or {}),
        )
        self._log_error(error_info, error)
        self._add_to_history(error_info)
        return error_info

    def exit_code_for(self, error: BaseException) -> int:
        return EXIT_CODES[self.classify(error)]

    def create_error_boundary(self, component_name: str,
                              fallback_function: Optional[Callable[[ErrorInfo], None]] = None):
        """
        Create an error boundary decorator for functions returning an exit code

        An escaping exception is handled and replaced by its exit code; the
        optional fallback receives the ErrorInfo first (e.g. to finalize a
        manifest).
        """
        def decorator(func):
            @wraps(func)
            def wrapper(*args, **kwargs):
                try:
                    return func(*args, **kwargs)
                except Exception as e:
                    error_info = self.handle_error(e, component=component_name)
                    if fallback_function:
                        try:
                            fallback_function(error_info)
                        except Exception as fallback_error:
                            self.logger.error(f"Fallback function failed: {fallback_error}")
                    return error_info.exit_code
            return wrapper
        return decorator

    def _get_technical_details(self, error: BaseException) -> str:
        trace = "".join(traceback.format_exception(type(error), error, error.__traceback__))
        return f"{type(error).__name__}: {error}\n\nTraceback:\n{trace}"

    def _log_error(self, error_info: ErrorInfo, original_error: BaseException):
        log_message = (
            f"[{error_info.category.value.upper()}] "
            f"{error_info.component}: {error_info.message}"
        )
        if error_info.severity == ErrorSeverity.CRITICAL:
            self.logger.critical(log_message, exc_info=original_error)
        elif error_info.severity == ErrorSeverity.HIGH:
            self.logger.error(log_message)
        elif error_info.severity == ErrorSeverity.MEDIUM:
            self.logger.warning(log_message)
        else:
            self.logger.info(log_message)

    def _add_to_history(self, error_info: ErrorInfo):
        self._error_history.append(error_info)
        if len(self._error_history) > self._max_history_size:
            self._error_history = self._error_history[-self._max_history_size:]

    def get_error_history(self, limit: int = 10) -> List[ErrorInfo]:
        """Get recent error history"""
        return self._error_history[-limit:] if self._error_history else []

    def clear_error_history(self):
        self._error_history.clear()
        self.logger.debug("Error history cleared")

    def get_error_statistics(self) -> Dict[str, Any]:
        """Get error statistics for the run manifest"""
        if not self._error_history:
            return {"total_errors": 0}

        category_counts: Dict[str, int] = {}
        severity_counts: Dict[str, int] = {}
        component_counts: Dict[str, int] = {}
        for error in self._error_history:
            category = error.category.value
            category_counts[category] = category_counts.get(category, 0) + 1
            severity = error.severity.value
            severity_counts[severity] = severity_counts.get(severity, 0) + 1
            component = error.component or "unknown"
            component_counts[component] = component_counts.get(component, 0) + 1

        return {
            "total_errors": len(self._error_history),
            "by_category": category_counts,
            "by_severity": severity_counts,
            "by_component": component_counts,
            "most_recent": self._error_history[-1].timestamp.isoformat(),
        }


# Global error handler instance
error_handler = ErrorHandler()


def with_error_boundary(component_name: str,
                        fallback_function: Optional[Callable[[ErrorInfo], None]] = None):
    """Convenience decorator for adding error boundaries to exit-code functions"""
    return error_handler.create_error_boundary(component_name, fallback_function)
