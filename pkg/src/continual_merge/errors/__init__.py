"""
Continual Merge Error Handling Module

Provides the exception hierarchy shared by every numerical module, the
standardized error response format and the mapping from failures to CLI
exit codes.
"""

import traceback
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple, Type


class ErrorCode(Enum):
    """Standard error codes for merge operations"""
    # General errors
    UNKNOWN_ERROR = "UNKNOWN_ERROR"
    INVALID_PARAMETER = "INVALID_PARAMETER"
    EMPTY_INPUT = "EMPTY_INPUT"

    # Numerical errors
    SHAPE_MISMATCH = "SHAPE_MISMATCH"
    NON_FINITE = "NON_FINITE"
    RANK_OUT_OF_RANGE = "RANK_OUT_OF_RANGE"

    # Configuration errors
    CONFIG_INVALID = "CONFIG_INVALID"

    # Artifact errors
    ARTIFACT_MISSING = "ARTIFACT_MISSING"
    ARTIFACT_UNWRITABLE = "ARTIFACT_UNWRITABLE"


# Exit codes used by the command-line entry point
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


@dataclass
class ErrorResponse:
    """Standardized error response format"""
    code: str
    message: str
    details: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization"""
        result: Dict[str, Any] = {
            "error": {
                "code": self.code,
                "message": self.message
            }
        }

        if self.details:
            result["error"]["details"] = self.details

        return result


class MergeError(Exception):
    """Base exception class for continual merge errors"""

    def __init__(self,
                 message: str,
                 code: ErrorCode = ErrorCode.UNKNOWN_ERROR,
                 details: Optional[Dict[str, Any]] = None,
                 original_error: Optional[Exception] = None):
        super().__init__(message)
        self.message = message
        self.code = code
        self.details = details or {}
        self.original_error = original_error

    def to_response(self) -> ErrorResponse:
        """Convert to standardized error response"""
        return ErrorResponse(
            code=self.code.value,
            message=self.message,
            details=dict(self.details)
        )


class ValidationError(MergeError):
    """Rejected arguments: out-of-range counts, empty inputs, bad tags"""

    def __init__(self,
                 message: str,
                 parameter: Optional[str] = None,
                 expected_type: Optional[str] = None,
                 code: ErrorCode = ErrorCode.INVALID_PARAMETER):
        details: Dict[str, Any] = {}
        if parameter:
            details["parameter"] = parameter
        if expected_type:
            details["expected_type"] = expected_type

        super().__init__(message=message, code=code, details=details)


class ShapeMismatchError(ValidationError):
    """Operand shapes that do not chain or do not match"""

    def __init__(self,
                 message: str,
                 expected: Optional[Tuple[int, ...]] = None,
                 actual: Optional[Tuple[int, ...]] = None):
        super().__init__(message, code=ErrorCode.SHAPE_MISMATCH)
        if expected is not None:
            self.details["expected"] = list(expected)
        if actual is not None:
            self.details["actual"] = list(actual)


class RankError(ValidationError):
    """Requested rank outside [1, min(rows, cols)]"""

    def __init__(self, rank: int, max_rank: int):
        super().__init__(
            f"Rank {rank} outside valid range [1, {max_rank}]",
            parameter="rank",
            code=ErrorCode.RANK_OUT_OF_RANGE
        )
        self.details["max_rank"] = max_rank


class NumericalError(MergeError):
    """Non-finite inputs or values produced during optimization"""

    def __init__(self, message: str, where: Optional[str] = None, step: Optional[int] = None):
        details: Dict[str, Any] = {}
        if where:
            details["where"] = where
        if step is not None:
            details["step"] = step

        super().__init__(
            message=message,
            code=ErrorCode.NON_FINITE,
            details=details
        )


class ConfigurationError(MergeError):
    """Configuration errors"""

    def __init__(self, message: str, config_key: Optional[str] = None):
        details: Dict[str, Any] = {}
        if config_key:
            details["config_key"] = config_key

        super().__init__(
            message=message,
            code=ErrorCode.CONFIG_INVALID,
            details=details
        )


class ArtifactError(MergeError):
    """Missing or unwritable suite, checkpoint and report files"""

    def __init__(self, message: str, path: Optional[str] = None, missing: bool = True):
        details: Dict[str, Any] = {}
        if path:
            details["path"] = path

        super().__init__(
            message=message,
            code=ErrorCode.ARTIFACT_MISSING if missing else ErrorCode.ARTIFACT_UNWRITABLE,
            details=details
        )


class ErrorHandler:
    """
    Centralized error handling for the command-line surface

    Turns any exception into an ErrorResponse and chooses the process exit
    code: validation and configuration failures exit with 2, everything else
    with 3.
    """

    def __init__(self, include_traceback: bool = False):
        """
        Initialize error handler

        Args:
            include_traceback: Include Python traceback in error responses
        """
        self.include_traceback = include_traceback
        self.error_mappings: Dict[Type[Exception], Callable[[Any], ErrorResponse]] = {}
        self._setup_default_mappings()

    def _setup_default_mappings(self) -> None:
        """Setup default error type mappings, most specific first"""
        self.error_mappings.update({
            ValidationError: self._handle_merge_error,
            ConfigurationError: self._handle_merge_error,
            NumericalError: self._handle_traced_error,
            ArtifactError: self._handle_merge_error,
            MergeError: self._handle_traced_error,
            Exception: self._handle_generic_error
        })

    def handle_error(self, error: Exception) -> ErrorResponse:
        """
        Handle an error and return standardized response

        Args:
            error: Exception to handle

        Returns:
            ErrorResponse: Standardized error response
        """
        for error_type, handler in self.error_mappings.items():
            if isinstance(error, error_type):
                return handler(error)

        return self._handle_generic_error(error)

    def exit_code(self, error: Exception) -> int:
        """Process exit code for an error"""
        if isinstance(error, (ValidationError, ConfigurationError)):
            return EXIT_VALIDATION
        return EXIT_RUNTIME

    def register_error_handler(self,
                               error_type: Type[Exception],
                               handler: Callable[[Any], ErrorResponse]) -> None:
        """Register custom error handler for specific error type"""
        self.error_mappings = {error_type: handler, **self.error_mappings}

    def _handle_merge_error(self, error: MergeError) -> ErrorResponse:
        return error.to_response()

    def _handle_traced_error(self, error: MergeError) -> ErrorResponse:
        response = error.to_response()
        if self.include_traceback:
            response.details = response.details or {}
            response.details["traceback"] = traceback.format_exc()
        return response

    def _handle_generic_error(self, error: Exception) -> ErrorResponse:
        """Handle unexpected generic errors"""
        details: Dict[str, Any] = {
            "error_type": type(error).__name__
        }

        if self.include_traceback:
            details["traceback"] = traceback.format_exc()

        return ErrorResponse(
            code=ErrorCode.UNKNOWN_ERROR.value,
            message=str(error),
            details=details
        )


def create_error_handler(include_traceback: bool = False) -> ErrorHandler:
    """
    Factory function to create error handler

    Args:
        include_traceback: Include Python traceback in responses

    Returns:
        ErrorHandler: Configured error handler
    """
    return ErrorHandler(include_traceback=include_traceback)


class CommonErrors:
    """Pre-defined error scenarios shared across modules"""

    @staticmethod
    def empty_input(name: str) -> ValidationError:
        return ValidationError(
            f"{name} must not be empty",
            parameter=name,
            code=ErrorCode.EMPTY_INPUT
        )

    @staticmethod
    def non_finite(name: str) -> NumericalError:
        return NumericalError(f"{name} contains non-finite values", where=name)

    @staticmethod
    def shape_mismatch(name: str, expected: Tuple[int, ...], actual: Tuple[int, ...]) -> ShapeMismatchError:
        return ShapeMismatchError(
            f"{name}: expected shape {tuple(expected)}, got {tuple(actual)}",
            expected=expected,
            actual=actual
        )

    @staticmethod
    def unknown_tag(parameter: str, value: str, allowed: Any) -> ValidationError:
        return ValidationError(
            f"Unknown {parameter} '{value}'. Available: {list(allowed)}",
            parameter=parameter
        )

    @staticmethod
    def file_not_found(file_path: str) -> ArtifactError:
        return ArtifactError(f"File not found: {file_path}", path=file_path)
