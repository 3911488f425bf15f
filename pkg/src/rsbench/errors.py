"""Exception types raised by the toolkit.

Every error named in an operation contract has a concrete class here so
callers can catch precisely. The base classes split into config/data/value
families, which the CLI maps to exit codes.
"""


class RsbenchError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RsbenchError):
    """Invalid configuration (bad keys, bad values, malformed config file)."""


class DataError(RsbenchError):
    """Problem with input data on disk (missing, corrupt, wrong layout)."""


# raster-core

class UnsupportedFormat(DataError):
    pass


class CorruptFile(DataError):
    pass


class BandCountZero(DataError):
    pass


class IoFailure(DataError):
    pass


class IndexOutOfRange(RsbenchError):
    pass


# preprocess

class MaskedResizeUnsupported(RsbenchError):
    pass


class ChannelCountMismatch(RsbenchError):
    pass


class EmptyInput(RsbenchError):
    pass


class PipelineStepError(RsbenchError):
    """A pipeline step failed; carries the zero-based step index."""

    def __init__(self, step_index: int, message: str):
        super().__init__(f"pipeline step {step_index}: {message}")
        self.step_index = step_index


# extractors

class AllMaskedChannel(RsbenchError):
    pass


class ImageTooSmall(RsbenchError):
    pass


class EmptyTrainSplit(RsbenchError):
    pass


class SingularCovariance(RsbenchError):
    pass


class DimensionMismatch(RsbenchError):
    pass


class OddFeatureCount(RsbenchError):
    pass


class NotEnoughPatches(RsbenchError):
    pass


class ChannelMismatch(RsbenchError):
    pass


class EmptySelection(RsbenchError):
    pass


class ExtractionError(RsbenchError):
    """Per-sample extraction failure; carries the sample id."""

    def __init__(self, sample_id: str, message: str):
        super().__init__(f"sample {sample_id!r}: {message}")
        self.sample_id = sample_id


class UnknownId(DataError):
    pass


class DimensionInconsistent(DataError):
    pass


class MagicMismatch(DataError):
    pass


# eval

class EmptyMatrix(RsbenchError):
    pass


class TaskMismatch(RsbenchError):
    pass


class LengthMismatch(RsbenchError):
    pass


class ShapeMismatch(RsbenchError):
    pass


class NoPositives(RsbenchError):
    pass


# datasets

class LayoutMismatch(DataError):
    pass


class UnknownSplitFile(DataError):
    pass


class ClassCountMismatch(DataError):
    pass


class ChannelCountVaries(DataError):
    pass


# bench-runner

class MissingCounterpart(RsbenchError):
    pass
