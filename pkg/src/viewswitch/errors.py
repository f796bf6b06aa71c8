"""Exception types shared across the pipeline."""


class ViewSwitchError(Exception):
    """Base class for all pipeline errors."""


class ManifestParseError(ViewSwitchError):
    """A manifest line could not be parsed; the message names the line number."""


class FeatureIOError(ViewSwitchError):
    """A feature file is missing or malformed; the message names the video_id."""


class RecordValidationError(ViewSwitchError):
    """A record violates a corpus invariant; the message names the video_id."""


class InsufficientContextError(ViewSwitchError):
    """No past frames are available at the requested prediction time."""


class UnlabeledTargetError(ViewSwitchError):
    """No view label covers the prediction interval."""


class EmptyNarrationIntervalError(ViewSwitchError):
    """A narration interval contains zero frames."""


class ShotBelowClipLengthError(ViewSwitchError):
    """A shot is shorter than one classifier clip."""


class DegenerateSubsetError(ViewSwitchError):
    """A metric was requested on an input with only one class present."""


class DegenerateGrammarError(ViewSwitchError):
    """A corpus grammar cannot generate data (e.g. empty vocabulary)."""


class SequenceTooLongError(ViewSwitchError):
    """An assembled token sequence exceeds the model's positional table."""


class CheckpointConfigError(ViewSwitchError):
    """A checkpoint was loaded against an incompatible configuration."""


class TrainingDivergedError(ViewSwitchError):
    """Training produced a non-finite loss."""
