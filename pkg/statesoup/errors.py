"""
Exceptions raised by statesoup.
"""


class StateSoupError(Exception):
    """
    Base class of every error raised on purpose by statesoup.
    """


class ConfigError(StateSoupError, ValueError):
    """
    A configuration record violates its invariants.
    """


class ShapeError(StateSoupError, ValueError):
    """
    Tensor or vector shapes do not agree.
    """


class TokenRangeError(StateSoupError, ValueError):
    """
    A token id lies outside the vocabulary.
    """


class NonFiniteError(StateSoupError, ValueError):
    """
    A NaN or an infinity reached a place that requires finite values.
    """


class SequenceTooShortError(StateSoupError, ValueError):
    """
    A token sequence is too short for the requested computation.
    """


class ZeroNormError(StateSoupError, ValueError):
    """
    A vector with zero norm was given where a direction is needed.
    """


class EmptyLibraryError(StateSoupError, ValueError):
    """
    A skill library has no entries.
    """


class HashMismatchError(StateSoupError, ValueError):
    """
    Snapshots or libraries were produced by differently configured models.
    """

    def __init__(self, expected, actual):
        super(HashMismatchError, self).__init__(
            'model hash mismatch: expected {0}, got {1}'.format(
                expected, actual))
        self.expected = expected
        self.actual = actual


class InsufficientExamplesError(StateSoupError, ValueError):
    """
    A task has fewer usable examples than requested.
    """


class MixRecipeError(StateSoupError, ValueError):
    """
    A mixing recipe is invalid for the given operands.
    """


class CorpusError(StateSoupError, ValueError):
    """
    A sequential corpus cannot be built from the given source.
    """


class TrainingDivergedError(StateSoupError, ArithmeticError):
    """
    The training loss became non-finite.
    """

    def __init__(self, step, loss, last_finite_loss=None):
        super(TrainingDivergedError, self).__init__(
            'loss diverged at step {0}: {1} (last finite loss: {2})'.format(
                step, loss, last_finite_loss))
        self.step = step
        self.loss = loss
        self.last_finite_loss = last_finite_loss


class FormatError(StateSoupError, ValueError):
    """
    A binary file does not follow the expected format.
    """


class UnsupportedVersionError(FormatError):
    """
    A binary file uses a format version this build cannot read.
    """

    def __init__(self, version, accepted_versions):
        super(UnsupportedVersionError, self).__init__(
            'unsupported format version {0} (supported: {1})'.format(
                version, ', '.join(str(x) for x in sorted(accepted_versions))))
        self.version = version


class TruncatedFileError(FormatError):
    """
    The payload of a binary file is shorter or longer than its manifest.
    """
