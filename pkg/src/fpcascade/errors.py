"""Exception hierarchy.

Every error carries a module-qualified ``code`` (e.g. ``"nifti.BadMagic"``)
and an ``exit_code`` used by the command line front end:
2 config, 3 data, 4 numeric failure, 5 I/O.
"""


class FpcError(Exception):
    module = "fpcascade"
    exit_code = 1

    @property
    def code(self):
        return f"{self.module}.{type(self).__name__}"


class ConfigError(FpcError):
    exit_code = 2


class DataError(FpcError, ValueError):
    exit_code = 3


class NumericError(FpcError, ArithmeticError):
    exit_code = 4


class IoFailure(FpcError, OSError):
    module = "nifti"
    exit_code = 5


# nifti ---------------------------------------------------------------------

class NiftiError(DataError):
    module = "nifti"


class WrongSize(NiftiError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class NonPositiveSpacing(NiftiError):
    pass


class InconsistentHeader(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class InvalidVolume(DataError):
    module = "volume"


# preprocess ----------------------------------------------------------------

class PreprocessError(DataError):
    module = "preprocess"


class DegenerateWindow(PreprocessError):
    pass


class ZeroStd(PreprocessError):
    pass


class PatchTooLarge(PreprocessError):
    pass


class EmptyCorpus(PreprocessError):
    pass


# tensor engine -------------------------------------------------------------

class EngineError(DataError):
    module = "engine"


class ShapeMismatch(EngineError):
    pass


class UnboundInput(EngineError):
    pass


class NonScalarOutput(EngineError):
    pass


class CheckpointError(EngineError):
    pass


# networks / losses ---------------------------------------------------------

class ConfigInvalid(ConfigError):
    module = "networks"


class LossError(DataError):
    module = "losses"


class EmptyInput(LossError):
    pass


class ProbabilityOutOfRange(LossError):
    pass


# pretrain ------------------------------------------------------------------

class NotTumorSlice(DataError):
    module = "pretrain"


class BatchTooSmall(DataError):
    module = "pretrain"


# trainer -------------------------------------------------------------------

class TrainerError(DataError):
    module = "trainer"


class MissingGrad(TrainerError):
    pass


class BadEpoch(TrainerError):
    pass


class InsufficientSlices(TrainerError):
    pass


class NonFiniteLoss(NumericError):
    module = "trainer"


# cascade / metrics ---------------------------------------------------------

class MisalignedInputs(DataError):
    module = "cascade"


class EmptyModelList(DataError):
    module = "cascade"


class ExtentMismatch(DataError):
    module = "metrics"


class HealthyCase(DataError):
    module = "metrics"


class TooFewSubmissions(DataError):
    module = "metrics"


# phantom -------------------------------------------------------------------

class SpecInvalid(DataError):
    module = "phantom"


# cli -----------------------------------------------------------------------

class ConfigParse(ConfigError):
    module = "cli"
