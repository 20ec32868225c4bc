"""Exception types shared across the package."""


class ZipGaitError(Exception):
    """Base class for all package errors."""


class InvalidParameter(ZipGaitError, ValueError):
    pass


class ShapeError(ZipGaitError, ValueError):
    pass


class DegenerateSkeleton(ZipGaitError, ValueError):
    pass


class DivisionGuard(ZipGaitError, ArithmeticError):
    pass


class SigmaOverflow(ZipGaitError, ArithmeticError):
    pass


class TrainingDiverged(ZipGaitError, RuntimeError):
    pass


class ParseError(ZipGaitError, ValueError):
    """Malformed input file; the message names the file and, when known, the frame."""

    def __init__(self, path, message, frame=None):
        self.path = str(path)
        self.frame = frame
        where = self.path if frame is None else f"{self.path} (frame {frame})"
        super().__init__(f"{where}: {message}")


class AlignmentError(ZipGaitError, ValueError):
    pass


class IncompatibleCheckpoint(ZipGaitError, ValueError):
    pass
