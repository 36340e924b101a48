"""Exception taxonomy and run diagnostics shared across the library.

Numeric trouble is split into two channels: hard errors (exceptions below)
for contract violations, and soft events (Diagnostics counters) for clamps
and fallbacks that the algorithms are expected to survive.
"""

from dataclasses import dataclass, fields


class EstimationError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(EstimationError):
    pass


class IndexOutOfRange(EstimationError):
    pass


class SingularCovariance(EstimationError):
    pass


class SingularPrecision(EstimationError):
    pass


class EmptyMixture(EstimationError):
    pass


class DegenerateWeights(EstimationError):
    """All particle weights vanished or turned non-finite."""


class NonFiniteJacobian(EstimationError):
    pass


class InvalidParam(EstimationError):
    pass


class UnknownAlgorithm(EstimationError):
    pass


class ConfigError(EstimationError):
    pass


class ConfigMismatch(ConfigError):
    """Forward cache and requested smoother disagree on the filter case."""


class LengthMismatch(EstimationError):
    pass


class ToleranceNotMet(EstimationError):
    pass


@dataclass
class Diagnostics:
    """Counters for soft numeric events.

    indefinite_clamp   covariance-difference eigenvalues clamped up to PSD
    jitter_applied     inversions that needed the jitter fallback
    backward_collapse  backward steps that fell back to forward weights
    weight_collapse    forward weight normalizations that collapsed
    flat_pseudo        particles whose pseudo-measurement precision was flat
    """

    indefinite_clamp: int = 0
    jitter_applied: int = 0
    backward_collapse: int = 0
    weight_collapse: int = 0
    flat_pseudo: int = 0

    def merge(self, other: "Diagnostics") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def any_events(self) -> bool:
        return any(getattr(self, f.name) for f in fields(self))
