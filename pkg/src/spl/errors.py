"""Exception types shared across the package."""


class SplError(Exception):
    """Base class for all package-specific errors."""


class MissingFile(SplError):
    pass


class MalformedRecord(SplError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = str(path)
        self.line_no = line_no


class CalibrationInvalid(SplError):
    pass


class GroundFitFailed(SplError):
    pass


class InvalidPixelHeight(SplError):
    pass


class NoValidCluster(SplError):
    pass


class EmptyObject(SplError):
    pass


class TooFewPoints(SplError):
    pass


class TrackTooShort(SplError):
    pass


class NoPositiveInMemory(SplError):
    pass


class InsufficientMemory(SplError):
    def __init__(self, class_id, have, need):
        super().__init__(
            f"class {class_id}: {have} stored features, need at least {need}"
        )
        self.class_id = class_id


class DimMismatch(SplError):
    pass


class FrameMismatch(SplError):
    pass
