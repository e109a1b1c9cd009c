class MicroCPDError(Exception):
    """Base class for all package errors."""


class StructureParseError(MicroCPDError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SelectionError(MicroCPDError, ValueError):
    pass


class MissingRadiusError(MicroCPDError, ValueError):
    pass


class GeometryError(MicroCPDError, ValueError):
    """Degenerate backbone geometry (collinear atoms, ambiguous frame)."""


class ShapeError(MicroCPDError, ValueError):
    pass


class ConfigError(MicroCPDError, ValueError):
    pass


class FileFormatError(MicroCPDError, ValueError):
    """Bad magic number or malformed header in a binary artifact."""


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class CheckpointShapeError(FileFormatError):
    pass


class TrainingDivergedError(MicroCPDError, FloatingPointError):
    def __init__(self, step, lr, grad_norm):
        self.step, self.lr, self.grad_norm = step, lr, grad_norm
        super().__init__(f"non-finite loss at step {step} (lr={lr:g}, grad_norm={grad_norm:g})")
