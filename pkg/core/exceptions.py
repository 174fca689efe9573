"""
Custom exception classes for the sparse boundary-aware captioning library
"""

from typing import Optional, Sequence


class SBATError(Exception):
    """Base class for every error raised by the library"""
    pass


class DimensionError(SBATError):
    """Kernel received operands whose shapes do not conform"""

    def __init__(self, kernel: str, *extents: Sequence[int], detail: str = ""):
        self.kernel = kernel
        self.extents = tuple(tuple(e) for e in extents)
        shapes = " vs ".join("x".join(str(n) for n in e) or "scalar" for e in self.extents)
        message = f"{kernel}: incompatible shapes {shapes}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class ContractError(SBATError):
    """A pre- or post-condition of an operation was violated"""
    pass


class AlignmentError(SBATError):
    """Image and motion streams do not share the same number of steps"""
    pass


class SequenceLengthError(SBATError):
    """Sequence is longer than the configured maximum"""
    pass


class ConfigError(SBATError):
    """Configuration-related errors"""
    pass


class DatasetFormatError(SBATError):
    """Malformed dataset or vocabulary file"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


class CheckpointError(SBATError):
    """Checkpoint manifest or blob is missing, inconsistent or unreadable"""
    pass


class TrainingError(SBATError):
    """Training cannot proceed (empty split, non-finite loss)"""
    pass


class UsageError(SBATError):
    """Command-line usage error"""
    pass
