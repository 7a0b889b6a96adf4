"""Exception hierarchy shared by every radarchive module."""


class RadarArchiveError(Exception):
    """Base class for all errors raised by radarchive."""


class InvalidArgumentError(RadarArchiveError, ValueError):
    pass


class InvalidPathError(InvalidArgumentError):
    pass


class NotFoundError(RadarArchiveError, LookupError):
    pass


class PathNotFoundError(NotFoundError):
    """A tree or store path could not be resolved.

    ``resolved_prefix`` holds the deepest prefix that did resolve ("" when
    not even the first segment exists).
    """

    def __init__(self, path, resolved_prefix=""):
        self.path = str(path)
        self.resolved_prefix = resolved_prefix
        super().__init__(
            f"path {self.path!r} not found (deepest resolved prefix: {resolved_prefix!r})"
        )


# --- radar model -------------------------------------------------------------

class DuplicateTimeError(InvalidArgumentError):
    pass


class OutOfOrderError(InvalidArgumentError):
    pass


class GeometryConflictError(InvalidArgumentError):
    pass


# --- raw format --------------------------------------------------------------

class FormatError(RadarArchiveError, ValueError):
    """Malformed RDT-RAW input. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class TruncationError(FormatError):
    pass


class UnknownMomentError(FormatError):
    pass


class EncodingError(RadarArchiveError, ValueError):
    pass


# --- chunk store -------------------------------------------------------------

class CodecError(RadarArchiveError, ValueError):
    pass


class CorruptFrameError(CodecError):
    pass


class ChunkRangeError(RadarArchiveError, IndexError):
    pass


class DataTypeError(RadarArchiveError, TypeError):
    pass


class ObjectNotFoundError(NotFoundError):
    pass


class CorruptObjectError(RadarArchiveError):
    pass


class CorruptLayoutError(RadarArchiveError):
    pass


# --- transactions ------------------------------------------------------------

class UnknownBranchError(NotFoundError):
    pass


class UnknownSnapshotError(NotFoundError):
    pass


class TransactionStateError(RadarArchiveError):
    pass


class ConflictError(RadarArchiveError):
    """Concurrent changes cannot be reconciled; ``report`` lists the conflicts."""

    def __init__(self, message, report):
        self.report = report
        super().__init__(message)


class StaleBaseError(ConflictError):
    """The branch moved after the transaction began."""


class InvalidRollbackError(RadarArchiveError):
    pass


class CorruptRepositoryError(RadarArchiveError):
    pass


# --- analysis ----------------------------------------------------------------

class InsufficientDataError(RadarArchiveError):
    pass


class OutOfCoverageError(RadarArchiveError):
    pass


class SimulatedCrash(BaseException):
    """Raised by fault injection to emulate a process dying mid-write.

    Derives from BaseException so ordinary ``except Exception`` cleanup
    paths do not run, mirroring a real kill.
    """
