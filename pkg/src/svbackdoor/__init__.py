"""Desk-scale lab for universal backdoor attacks on speaker verification."""

from svbackdoor.errors import (
    DegenerateInputError,
    FormatError,
    InvalidArgumentError,
    StageDependencyError,
    SynthesisFailure,
    UnsupportedFormatError,
)

SAMPLE_RATE = 16000

__version__ = "0.1.0"

__all__ = [
    "SAMPLE_RATE",
    "DegenerateInputError",
    "FormatError",
    "InvalidArgumentError",
    "StageDependencyError",
    "SynthesisFailure",
    "UnsupportedFormatError",
]
