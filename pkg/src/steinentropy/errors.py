"""Exception types raised across the package."""


class DimensionMismatchError(ValueError):
    """Operands live on different bases or have incompatible shapes."""


class OrderCapError(ValueError):
    """A product would exceed the configured chaos-order cap."""


class HypothesisViolation(ValueError):
    """Inputs fall outside the gate under which a bound is valid."""


class UnreliableRegionError(ValueError):
    """A density-based estimate was requested where the density is not resolved."""


class SampleSizeError(ValueError):
    """Too few samples for the requested estimator."""


class DegenerateSampleError(ValueError):
    """A sample column is (numerically) constant."""
