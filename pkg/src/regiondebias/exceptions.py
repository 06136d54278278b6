"""Exception hierarchy.

Input/configuration problems derive from ``ValueError`` so they behave like
ordinary argument errors; runtime failures derive from ``RuntimeError``.
"""


class RegionDebiasError(Exception):
    """Base class for all package errors."""


class InputError(RegionDebiasError, ValueError):
    pass


class ConfigurationError(InputError):
    pass


class MissingMaskError(InputError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DegenerateSupportError(InputError):
    pass


class GenerationError(InputError):
    pass


class StratificationError(InputError):
    pass


class ManifestParseError(InputError):
    pass


class NumericalError(RegionDebiasError, RuntimeError):
    pass


class CapabilityError(RegionDebiasError, RuntimeError):
    """The encoder does not expose a required capability (gradients, attention)."""


class ProviderError(RegionDebiasError, RuntimeError):
    """An external mask provider failed or is unavailable."""


class UndefinedCorrelationError(NumericalError):
    pass
