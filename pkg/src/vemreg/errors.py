"""Error handling for vemreg.

Provides a consistent error schema shared by the library, the CLI and the
tool server. Every error knows the process exit code it maps to.
"""

from typing import Any


class VemregError(Exception):
    """Base error for registration, scan and benchmark failures."""

    def __init__(
        self,
        error_type: str,
        message: str,
        exit_code: int = 2,
        details: dict[str, Any] | None = None,
        suggestions: list[str] | None = None,
    ):
        self.error_type = error_type
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}
        self.suggestions = suggestions or []
        super().__init__(message)

    def to_dict(self) -> dict[str, Any]:
        """Convert to error response dictionary."""
        return {
            "error": {
                "type": self.error_type,
                "code": self.exit_code,
                "message": self.message,
                "details": self.details,
                "suggestions": self.suggestions,
            }
        }


class ValidationError(VemregError):
    """Invalid argument or configuration value."""

    def __init__(
        self,
        message: str,
        details: dict[str, Any] | None = None,
        suggestions: list[str] | None = None,
    ):
        super().__init__(
            error_type="validation_error",
            message=message,
            exit_code=2,
            details=details,
            suggestions=suggestions,
        )


class NotFoundError(VemregError):
    """Input file not found."""

    def __init__(
        self,
        message: str,
        details: dict[str, Any] | None = None,
        suggestions: list[str] | None = None,
    ):
        super().__init__(
            error_type="not_found_error",
            message=message,
            exit_code=2,
            details=details,
            suggestions=suggestions,
        )


class ScanFormatError(VemregError):
    """Scan or mesh file does not conform to the expected format."""

    def __init__(
        self,
        message: str,
        field: str | None = None,
        details: dict[str, Any] | None = None,
        suggestions: list[str] | None = None,
    ):
        details = dict(details or {})
        if field is not None:
            details.setdefault("field", field)
        super().__init__(
            error_type="format_error",
            message=message,
            exit_code=2,
            details=details,
            suggestions=suggestions,
        )


class DegenerateInputError(VemregError):
    """Input is valid but too poor to register or evaluate."""

    def __init__(
        self,
        message: str,
        details: dict[str, Any] | None = None,
        suggestions: list[str] | None = None,
    ):
        super().__init__(
            error_type="degenerate_input",
            message=message,
            exit_code=2,
            details=details,
            suggestions=suggestions,
        )


class NoCompatiblePairsError(DegenerateInputError):
    """Hough voting found no normal-compatible point pairs."""

    def __init__(self, details: dict[str, Any] | None = None):
        super().__init__(
            "no compatible normal pairs",
            details=details,
            suggestions=["Check that both scans carry normals facing their cameras"],
        )


class RegistrationFailedError(VemregError):
    """No candidate alignment had a finite energy."""

    def __init__(
        self,
        message: str,
        details: dict[str, Any] | None = None,
        suggestions: list[str] | None = None,
    ):
        super().__init__(
            error_type="registration_failed",
            message=message,
            exit_code=2,
            details=details,
            suggestions=suggestions
            or ["Inspect the per-edge energies; at least one pair must register"],
        )


def format_exception(exc: BaseException) -> VemregError:
    """Convert an arbitrary exception to a VemregError."""
    if isinstance(exc, VemregError):
        return exc
    return VemregError(
        error_type="internal_error",
        message=str(exc) or exc.__class__.__name__,
        exit_code=1,
        details={"exception": exc.__class__.__name__},
    )
