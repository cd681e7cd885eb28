from typing import Optional


class LvdgsError(Exception):
    """Base class for every error raised by this project"""


# Geometry
class GeometryError(LvdgsError):
    pass


class BehindCamera(GeometryError):
    pass


# Registration
class RegistrationError(LvdgsError):
    pass


class EmptyInput(RegistrationError):
    pass


class Diverged(RegistrationError):
    pass


# Rendering
class RenderError(LvdgsError):
    pass


class StateMismatch(RenderError):
    pass


# Losses / masks
class LossError(LvdgsError):
    pass


class EmptyPixelSet(LossError):
    pass


class MaskError(LvdgsError):
    pass


class ShapeMismatch(MaskError, ValueError):
    pass


# Assets and files
class AssetError(LvdgsError):
    """Error tied to a file on disk; the message always names the path"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = str(path) if path is not None else None
        if self.path:
            message = f"{message} [{self.path}]"
        super().__init__(message)


class MissingFile(AssetError):
    pass


class DimensionMismatch(AssetError):
    pass


class CalibrationParseError(AssetError):
    pass


class MalformedFile(AssetError):
    pass


class MalformedScan(MalformedFile):
    pass


class BadMagic(MalformedFile):
    pass


class TruncatedFile(MalformedFile):
    pass


class TrajectoryParseError(MalformedFile):
    pass


class IoFailure(AssetError):
    pass


# Configuration
class ConfigError(LvdgsError):
    pass


# Evaluation
class EvalError(LvdgsError):
    pass


class LengthMismatch(EvalError):
    pass


class DegenerateTrajectory(EvalError):
    pass


class TooSmall(EvalError):
    pass
