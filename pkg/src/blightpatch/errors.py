"""Exception hierarchy shared by all pipeline stages."""


class BlightPatchError(Exception):
    """Base class; ``stage`` names the pipeline module that raised it."""

    stage = "blightpatch"


# geometry
class GeometryError(BlightPatchError):
    stage = "geometry"


class SquareOutOfBounds(GeometryError):
    pass


class InvalidAngle(GeometryError):
    pass


# sampler
class SamplerError(BlightPatchError):
    stage = "sampler"


class PatchCannotFit(SamplerError):
    pass


class InvalidMaskValue(SamplerError):
    pass


class PatchSetFormatError(SamplerError):
    pass


# dataset
class DatasetError(BlightPatchError):
    stage = "dataset"


class ManifestParseError(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


class MaskDimensionMismatch(DatasetError):
    pass


class LabelMaskInconsistency(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


# model
class ModelError(BlightPatchError):
    stage = "model"


class EmptyPatchSet(ModelError):
    pass


class NonFiniteLoss(ModelError):
    pass


class ArchitectureMismatch(ModelError):
    pass


class WeightFileError(ModelError):
    pass


# predictor
class PredictorError(BlightPatchError):
    stage = "predictor"


class IndivisiblePatchSize(PredictorError):
    pass


class PatchTooLarge(PredictorError):
    pass


# evaluation
class EvaluationError(BlightPatchError):
    stage = "evaluation"


class LengthMismatch(EvaluationError):
    pass


class FoldFailed(EvaluationError):
    pass
