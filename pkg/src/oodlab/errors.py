"""Exception types shared across the package."""


class OodLabError(Exception):
    """Base class for all package errors."""


class NotSymmetric(OodLabError):
    """Matrix handed to an SPD routine is not symmetric."""


class NotPositiveDefinite(OodLabError):
    """Cholesky pivot was non-positive; covariance needs regularization."""


class DimensionMismatch(OodLabError):
    """Vector/factor dimensions do not agree."""


class NonFiniteValue(OodLabError):
    """A probed function returned NaN or infinity."""


class ShapeMismatch(OodLabError):
    """Image or array shape does not match what the model expects."""


class Diverged(OodLabError):
    """Training loss became non-finite."""


class ZeroNormEmbedding(OodLabError):
    """Cosine similarity undefined: embedding norm below 1e-12."""


class ClassUnderpopulated(OodLabError):
    """A class has fewer than two examples; covariance fit impossible."""


class EmptyEnsemble(OodLabError):
    """Ensemble has no members."""


class NonFiniteGradient(OodLabError):
    """An input gradient contained NaN or infinity."""


class NonFiniteScore(OodLabError):
    """A score became non-finite during an attack."""


class EmptyInput(OodLabError):
    """AUROC requires at least one score in each population."""


class MalformedFile(OodLabError):
    """File does not conform to its declared binary layout."""


class IoError(OodLabError):
    """Underlying OS-level read/write failure."""


class BadMagic(OodLabError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(OodLabError):
    """File ended before the payload declared in its header."""


class DimensionZero(OodLabError):
    """Header declares a zero embedding dimension."""


class ConfigError(OodLabError):
    """Experiment config is missing keys or fails validation."""
