"""Exception types shared across the package."""


class VmheError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(VmheError):
    """Bad configuration file: unknown key, wrong arity, invalid value."""


class LowSpeedDomain(VmheError):
    """Slip angles requested below the configured longitudinal speed floor."""


class StepTooLarge(VmheError):
    """Integration step exceeds the configured maximum."""


class DegenerateGeometry(VmheError):
    """RADAR scan bearings do not span 3D; ego-velocity system is rank deficient."""


class TooFewDetections(VmheError):
    """Fewer usable detections than unknowns in the ego-velocity solve."""


class AntipodalDegenerate(VmheError):
    """Velocity direction opposite the reference axis; rotation correction undefined."""


class StaleMeasurement(VmheError):
    """Measurement timestamp precedes the active estimation window."""


class SingularNormalEquations(VmheError):
    """Normal equations remained singular after exhausting the damping schedule."""


class PlantDiverged(VmheError):
    """Simulated plant state left its sanity bounds."""


class SchemaMismatch(VmheError):
    """Log file header does not match the parser schema version."""


class MalformedLog(VmheError):
    """Too many unreadable rows in a log file."""
