"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it and maps
it to an exit code so callers can branch on failures without parsing text.
"""

from __future__ import annotations


class MawiflowError(Exception):
    category = "internal"


class CaptureFormatError(MawiflowError):
    category = "format"


class TruncatedCaptureError(MawiflowError):
    category = "truncated"

    def __init__(self, message: str, packets_read: int):
        super().__init__(message)
        self.packets_read = packets_read


class ContractError(MawiflowError):
    category = "contract"


class AnnotationParseError(MawiflowError):
    category = "parse"


class AnnotationFormatError(AnnotationParseError):
    category = "format"


class ValidationError(MawiflowError):
    category = "validation"


class AnnotationConflictError(MawiflowError):
    category = "conflict"


class ReorderError(MawiflowError):
    category = "reorder"

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class ConsistencyError(MawiflowError):
    category = "consistency"


class SchemaError(MawiflowError):
    category = "schema"


class SampleSizeError(MawiflowError):
    category = "sample"

    def __init__(self, message: str, available: int):
        super().__init__(message)
        self.available = available


class ChecksumError(MawiflowError):
    category = "checksum"


class StageError(MawiflowError):
    category = "stage"


EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "format": 3,
    "truncated": 4,
    "contract": 5,
    "parse": 6,
    "validation": 7,
    "conflict": 8,
    "reorder": 9,
    "consistency": 10,
    "schema": 11,
    "sample": 12,
    "checksum": 13,
    "stage": 14,
    "io": 15,
}
