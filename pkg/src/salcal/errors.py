"""Exception hierarchy.

Every error raised on purpose by this package derives from :class:`SalcalError`.
The intermediate classes group errors by subsystem so the CLI can map them to
stable exit codes.
"""


class SalcalError(Exception):
    """Base class for all package errors."""


class LineError(SalcalError):
    """An error tied to a 1-based line of a text file."""

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


# -- data -------------------------------------------------------------------

class DataError(SalcalError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass


class MalformedRow(LineError, DataError):
    pass


class NegativeCalories(LineError, DataError):
    pass


class DanglingImagePath(LineError, DataError):
    pass


class EmptyManifest(DataError, ValueError):
    pass


class UnwritableOutputDir(DataError, OSError):
    pass


class UnsupportedFormat(DataError, ValueError):
    pass


class CorruptImage(DataError, ValueError):
    pass


class EmptyTrainWarning(UserWarning):
    """A split left the training partition empty."""


# -- heatmap ----------------------------------------------------------------

class HeatmapError(SalcalError):
    pass


class BoxOutOfBounds(HeatmapError, ValueError):
    pass


class EvenKernel(HeatmapError, ValueError):
    pass


class NonPositiveSigma(HeatmapError, ValueError):
    pass


class UpsampleRequested(HeatmapError, ValueError):
    pass


class NonFiniteInput(HeatmapError, ValueError):
    pass


class UnwritablePath(HeatmapError, OSError):
    pass


# -- nn ---------------------------------------------------------------------

class ModelError(SalcalError):
    pass


class ShapeMismatch(ModelError, ValueError):
    pass


class NonFiniteLoss(ModelError, FloatingPointError):
    pass


class HeadMismatch(ModelError, ValueError):
    pass


class DimensionMismatch(ModelError, ValueError):
    pass


class VersionMismatch(ModelError, ValueError):
    pass


class CorruptCheckpoint(ModelError, ValueError):
    pass


# -- loss -------------------------------------------------------------------

class LossError(SalcalError, ValueError):
    pass


class LengthMismatch(LossError):
    pass


class EmptyInput(LossError):
    pass


class NotASimplex(LossError):
    pass


class IndexOutOfRange(LossError, IndexError):
    pass


class DimMismatch(LossError):
    pass


class AlphaOutOfRange(LossError):
    pass


class NonPositiveBaseline(LossError):
    pass


# -- train / ensemble -------------------------------------------------------

class TrainingError(SalcalError):
    pass


class MissingHsm(TrainingError, ValueError):
    def __init__(self, sample):
        self.sample = sample
        super().__init__(f"no human saliency map for sample {sample!r}")


class DivergedLoss(TrainingError, FloatingPointError):
    pass


class EmptyDataset(TrainingError, ValueError):
    pass


class TaskMismatch(TrainingError, ValueError):
    pass


class InvalidConfig(TrainingError, ValueError):
    pass


class HeadSwapMismatch(TrainingError, ValueError):
    pass


class TooFewMembers(TrainingError, ValueError):
    pass


class NonRegressionMember(TrainingError, ValueError):
    pass
