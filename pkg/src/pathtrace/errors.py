"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
InvariantError -> 4.
"""


class PathtraceError(Exception):
    """Base class for all package errors."""


class ConfigError(PathtraceError):
    """Invalid configuration: bad shapes, unsupported knob combinations."""


class ShapeError(ConfigError):
    """Tensor/bitmask shape or coverage mismatch."""


class UnsupportedCombinationError(ConfigError):
    """A knob combination the framework rejects (e.g. forward + cumulative)."""


class DataError(PathtraceError):
    """Malformed or incompatible input data (files, datasets, fingerprints)."""


class FingerprintMismatchError(DataError):
    """Offline profile and online detection used different model/config."""


class AssemblyError(PathtraceError):
    """Positioned assembler syntax or resolution error."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SimulationFault(PathtraceError):
    """Runtime fault during simulated program execution."""

    def __init__(self, message: str, instruction_index: int | None = None):
        self.instruction_index = instruction_index
        if instruction_index is not None:
            message = f"at instruction {instruction_index}: {message}"
        super().__init__(message)


class InvariantError(PathtraceError):
    """An internal invariant was violated; indicates a bug."""
