"""Exception types raised across the package."""


class BohmSimError(Exception):
    """Base class for all simulator errors."""


class ZeroNorm(BohmSimError, ValueError):
    pass


class GridMismatch(BohmSimError, ValueError):
    pass


class EmptyAxisSet(BohmSimError, ValueError):
    pass


class InconsistentParticleDims(BohmSimError, ValueError):
    pass


class MethodGridMismatch(BohmSimError, ValueError):
    pass


class SnapshotGap(BohmSimError, ValueError):
    pass


class NullSlice(BohmSimError, ValueError):
    """The conditional wave function vanishes at the requested environment point."""


class AxisOverlap(BohmSimError, ValueError):
    pass


class NotNormalized(BohmSimError, ValueError):
    pass


class OutOfDomain(BohmSimError, ValueError):
    pass


class BinningMismatch(BohmSimError, ValueError):
    pass


class BranchOverlap(BohmSimError, RuntimeError):
    """Pointer branches still overlap after the coupling window."""


class NotEffective(BohmSimError, ValueError):
    pass


class PreparationFailed(BohmSimError, RuntimeError):
    pass


class InsufficientRuns(BohmSimError, ValueError):
    pass


class EmptySelection(BohmSimError, ValueError):
    pass


class ConfigError(BohmSimError, ValueError):
    """Scenario configuration is malformed or incomplete."""
