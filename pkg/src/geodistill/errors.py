"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad field values, violated divisibility rules)."""


class ShapeMismatchError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class EmptyMaskError(ValueError):
    """Masked-reconstruction loss over a mask that selects zero pixels."""


class MaskRatioError(ValueError):
    """Mask ratio outside the open interval (0, 1)."""


class TeacherNotFrozenError(RuntimeError):
    """Teacher branch used before its parameters were frozen."""


class PairingError(ValueError):
    """Temporal-pair input mode requested on unpaired data."""


class ZeroVectorError(ValueError):
    """Feature vector with near-zero norm in strict normalization mode."""


class NonFiniteLossError(RuntimeError):
    """NaN or infinite loss encountered; training step aborted."""


class ChannelExtensionError(ValueError):
    """Requested channel count does not grow the patch embedding."""


class ManifestError(ValueError):
    """Manifest file failed to parse or validate."""


class DuplicatePathError(ManifestError):
    """Two manifest records point at the same image path."""


class NonPositiveGsdError(ManifestError):
    """Manifest record with ground sample distance <= 0."""


class EmptyManifestError(ManifestError):
    """Operation requires at least one manifest record."""


class EmptyImageError(ValueError):
    """Entropy of a zero-pixel image is undefined."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint container failures."""


class CorruptContainerError(CheckpointError):
    """Checkpoint file truncated or structurally invalid."""


class VersionMismatchError(CheckpointError):
    """Checkpoint written by an unsupported container version."""


class EmptySplitError(ValueError):
    """Finetuning or evaluation on an empty data split."""


class LabelRangeError(ValueError):
    """Segmentation label outside [0, num_classes)."""


class NoPositiveClassError(ValueError):
    """Average precision over a truth matrix with no positive labels."""


class MissingBaselineError(ValueError):
    """Score table lacks the designated baseline row."""


class MissingScoreError(ValueError):
    """Score table row does not cover every column."""


class InconsistentColumnsError(ValueError):
    """Score files disagree on the (dataset, metric) column set."""


class ZeroBaselineScoreError(ValueError):
    """Relative difference against a zero baseline score is undefined."""


class PlanInvalidError(ValueError):
    """Ablation plan is empty or names an unknown axis/value."""


class EmptyRunDirError(ValueError):
    """Report requested for a run directory with no curves or tables."""


class NegativeInputError(ValueError):
    """Carbon estimation inputs must be non-negative."""


class DataExhaustedError(RuntimeError):
    """Pretraining dataset yields no usable batches."""
