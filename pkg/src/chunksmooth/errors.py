"""Exception hierarchy shared across the package.

Three subfamilies map onto the CLI exit codes: configuration problems
(exit 2), data problems (exit 3) and numeric failures (exit 4).
"""


class ChunkSmoothError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ChunkSmoothError):
    """Invalid configuration or degenerate parameter combination (exit 2)."""


class DataError(ChunkSmoothError):
    """Unusable input data: files, manifests, checkpoints (exit 3)."""


class NumericError(ChunkSmoothError):
    """Numeric breakdown during training or scoring (exit 4)."""


# -- configuration ------------------------------------------------------------

class ConfigInvalid(ConfigError):
    pass


class NoSlackAndNoPadAllowed(ConfigError):
    """Slack+padding attack invoked with no slack bytes and zero padding."""


class AlignmentUnsatisfiable(ConfigError):
    """Requested insertion cannot be aligned to the file alignment."""


class ShapeMismatch(ConfigError):
    """Tensor shapes disagree with the model hyperparameters."""


# -- data ---------------------------------------------------------------------

class IoFailure(DataError):
    pass


class FileTooLarge(DataError):
    def __init__(self, actual: int, cap: int):
        super().__init__(f"file is {actual} bytes, cap is {cap}")
        self.actual = actual
        self.cap = cap


class EmptyFile(DataError):
    pass


class NotPe(DataError):
    """Input lacks the DOS/PE magic this parser requires."""


class MalformedSectionTable(DataError):
    """Section table is truncated, unordered, overlapping or out of bounds."""


class EmptyCorpus(DataError):
    pass


class BadMagic(DataError):
    """Checkpoint file does not start with the expected magic bytes."""


class VersionUnsupported(DataError):
    def __init__(self, version: int):
        super().__init__(f"checkpoint version {version} is not supported")
        self.version = version


class TruncatedFile(DataError):
    pass


class SectionTableFull(DataError):
    """No room left in the COFF section count for injected sections."""


class CapUnsatisfiable(DataError):
    """Even a zero-payload injection would exceed the size-ratio cap."""


class NoCavesAndNoGapPossible(DataError):
    """File has no code caves and too few sections for a fallback gap."""


# -- smoothing contracts ------------------------------------------------------

class NotLengthPreserving(ConfigError):
    """Edit region extends outside the original file, so the certificate
    logic (which assumes in-place byte substitution) does not apply."""


class NotSca(ConfigError):
    """Certification is only defined for deterministic even-spaced chunks."""


# -- numerics -----------------------------------------------------------------

class NonFiniteLoss(NumericError):
    pass


class OracleFailure(NumericError):
    """The black-box score oracle returned something unusable."""
