"""Exception hierarchy shared by every palrp module."""


class PalrpError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PalrpError, ValueError):
    pass


class DegenerateRowError(PalrpError, ValueError):
    """A softmax row had every column masked."""


class VocabularyError(PalrpError, IndexError):
    pass


class NonFiniteError(PalrpError, FloatingPointError):
    """NaN or Inf appeared in a tensor."""


class LengthError(PalrpError, ValueError):
    """Input sequence longer than the model's maximum length."""


class LoadError(PalrpError):
    """Base class for weight-container problems."""


class ManifestError(LoadError):
    pass


class MissingTensorError(LoadError):
    pass


class ShapeMismatchError(LoadError):
    pass


class TruncatedBlobError(LoadError):
    pass


class UnsupportedOpError(PalrpError):
    pass


class RegistryError(PalrpError, KeyError):
    pass


class TrainingFailureError(PalrpError):
    """Raised when the toy trainer misses its accuracy target.

    ``losses`` holds the per-epoch loss trace for diagnosis.
    """

    def __init__(self, message, losses=()):
        super().__init__(message)
        self.losses = list(losses)
