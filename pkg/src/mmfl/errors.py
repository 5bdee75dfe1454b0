"""Exception types raised across the package."""


class MMFLError(Exception):
    """Base class for all errors raised by mmfl."""


class InvalidStats(MMFLError, ValueError):
    pass


class ExcludedConfiguration(MMFLError, ValueError):
    """Raised for missing statistics (p_m, p_s) = (1, 1): every modality of every sample is gone."""


class ShapeMismatch(MMFLError, ValueError):
    pass


class InvalidShape(MMFLError, ValueError):
    pass


class AllMissing(MMFLError, ValueError):
    pass


class InsufficientBatch(MMFLError, ValueError):
    pass


class InvalidKappa(MMFLError, ValueError):
    pass


class InvalidP(MMFLError, ValueError):
    pass


class EmptySelection(MMFLError, ValueError):
    pass


class Degenerate(MMFLError, ValueError):
    pass


class FormatError(MMFLError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class InvalidM(MMFLError, ValueError):
    pass


class NameMismatch(MMFLError, ValueError):
    pass


class ZeroWeights(MMFLError, ValueError):
    pass


class DimensionMismatch(MMFLError, ValueError):
    pass


class EmptyInput(MMFLError, ValueError):
    pass


class EmptyClient(MMFLError, ValueError):
    pass


class EmptyTestSet(MMFLError, ValueError):
    pass


class InvalidSize(MMFLError, ValueError):
    pass


class ConfigError(MMFLError, ValueError):
    """Configuration validation failure; carries the offending key and source line when known."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = ""
        if line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)
