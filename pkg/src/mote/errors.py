"""Exception hierarchy shared by every module.

Each error carries a stable ``kind`` string so the CLI can emit
machine-readable diagnostics.
"""


class MoteError(Exception):
    kind = "error"


class InvalidInputError(MoteError, ValueError):
    kind = "invalid-input"


class UnsupportedBitWidthError(MoteError, ValueError):
    kind = "unsupported-bit-width"


class InvalidCodeError(MoteError, ValueError):
    kind = "invalid-code"


class CorruptWeightsError(MoteError, ValueError):
    kind = "corrupt-weights"


class ShapeError(MoteError, ValueError):
    kind = "shape"


class OverflowRiskError(MoteError, ValueError):
    kind = "overflow-risk"


class InvalidTokenError(MoteError, ValueError):
    kind = "invalid-token"


class ConfigError(MoteError, ValueError):
    kind = "config"


class EmptyResponseError(MoteError, ValueError):
    kind = "empty-response"


class EmptySelectionError(MoteError, ValueError):
    kind = "empty-selection"


class TrainingDivergedError(MoteError, RuntimeError):
    kind = "training-diverged"


class CheckpointError(MoteError):
    kind = "checkpoint"


class CorruptManifestError(CheckpointError):
    kind = "corrupt-manifest"


class UnsupportedVersionError(CheckpointError):
    kind = "unsupported-version"


class UnsupportedDtypeError(CheckpointError):
    kind = "unsupported-dtype"


class MissingTensorError(CheckpointError):
    kind = "missing-tensor"


class ShapeMismatchError(CheckpointError):
    kind = "shape-mismatch"


class CheckpointIOError(CheckpointError, OSError):
    kind = "io"


class ExportIOError(MoteError, OSError):
    kind = "io"
