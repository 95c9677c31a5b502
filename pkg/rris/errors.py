"""Error types shared by every rris module.

Each error carries a stable ``code`` (used in messages and tests) and the
process exit code the CLI maps it to.
"""

from typing import Optional

# Exit codes of the command line contract
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_GENERATION = 3


class RrisError(Exception):
    """Base class for all toolkit errors."""

    code = "rris-error"
    exit_code = EXIT_INPUT

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self) -> str:
        return f"[{self.code}] {self.args[0]}"


class MaskError(RrisError):
    code = "shape-mismatch"


class MetricError(RrisError):
    code = "empty-input"


class ExpressionError(RrisError):
    code = "empty-expression"


class GenerationExhausted(RrisError):
    code = "generation-exhausted"
    exit_code = EXIT_GENERATION


class DatasetError(RrisError):
    code = "parse-error"


class ModelError(RrisError):
    code = "shape-mismatch"
