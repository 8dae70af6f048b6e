"""Exception types raised across the pipeline."""

from __future__ import annotations


class ChunkPDError(Exception):
    """Base class for all package errors."""

    exit_code = 1


# dataset ingest
class MissingRoot(ChunkPDError):
    exit_code = 2


class LabelConflict(ChunkPDError):
    pass


class UnknownDrawingType(ChunkPDError):
    pass


class TooFewSubjects(ChunkPDError):
    pass


class ManifestFormatError(ChunkPDError):
    pass


# preprocessing
class EmptyImage(ChunkPDError):
    pass


class SizeMismatch(ChunkPDError):
    pass


# encoders / classifiers
class ModelNotLoaded(ChunkPDError):
    exit_code = 2


class DimensionMismatch(ChunkPDError):
    pass


class EmptyTrainingSet(ChunkPDError):
    exit_code = 3


class DivergedLoss(ChunkPDError):
    exit_code = 3


class EmptyFeatures(ChunkPDError):
    exit_code = 3


class SingleClassTraining(ChunkPDError):
    exit_code = 3


class EmptyVote(ChunkPDError):
    pass


class MixedParents(ChunkPDError):
    pass


# evaluation
class DegenerateFold(ChunkPDError):
    pass


class UnknownId(ChunkPDError):
    pass


class EmptyPredictions(ChunkPDError):
    pass


class EmptyInput(ChunkPDError):
    pass


# experiment driver
class ConfigError(ChunkPDError):
    pass


class MissingArtifact(ChunkPDError):
    exit_code = 2


class RunLocked(ChunkPDError):
    pass
