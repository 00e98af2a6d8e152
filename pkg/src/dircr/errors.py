"""Exception types raised across the package."""


class DircrError(Exception):
    pass


class InconsistentPrefix(DircrError):
    """The first two row values cannot satisfy the rule."""


class RangeViolation(DircrError):
    """The forced third value falls outside the attribute range."""


class GenerationExhausted(DircrError):
    pass


class FormatError(DircrError):
    pass


class TruncatedFile(FormatError):
    pass


class ShapeMismatch(DircrError, ValueError):
    pass


class DegenerateInput(DircrError):
    """Projection input collapsed to (near) zero norm."""


class NonFiniteLoss(DircrError):
    pass


class EmptyDataset(DircrError):
    pass


class VersionMismatch(DircrError):
    pass


class CorruptFile(DircrError):
    pass


class ConfigError(DircrError, ValueError):
    pass


class IndexOutOfRange(DircrError, IndexError):
    pass
