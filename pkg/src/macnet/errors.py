class MacNetError(Exception):
    pass


class DimensionError(MacNetError, ValueError):
    pass


class ConfigurationError(MacNetError, ValueError):
    pass


class GradientError(MacNetError, RuntimeError):
    """Raised for misuse of the differentiation machinery."""


class ModeError(MacNetError, RuntimeError):
    pass


class NumericFault(MacNetError, FloatingPointError):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class LabelError(MacNetError, ValueError):
    pass


class ContractError(MacNetError, ValueError):
    pass


class DegenerateWeightsError(MacNetError, ValueError):
    pass


class ManifestError(MacNetError, ValueError):
    pass


class ImageDecodeError(MacNetError, ValueError):
    pass


class UnsupportedFormatError(ImageDecodeError):
    pass


class CheckpointError(MacNetError, ValueError):
    pass
