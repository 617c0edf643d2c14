"""Exception hierarchy shared across the package."""


class QprlError(Exception):
    """Base class for all package-specific failures."""


class InfeasibleError(QprlError):
    """Hard-constrained problem has an empty feasible set."""


class MaxIterationsError(QprlError):
    """Active-set iteration guard tripped before convergence."""


class SingularKktError(QprlError):
    """Optimality-system Jacobian is rank deficient beyond the damping tolerance."""


class RankDeficientError(QprlError):
    """A least-squares fit has insufficient excitation to identify its unknowns."""


class ConfigError(QprlError):
    """Run configuration is malformed or inconsistent."""


class EnvMismatchError(QprlError):
    """Operation requested for an environment it does not support."""


class VersionMismatchError(QprlError):
    """Checkpoint file was written by an incompatible format version."""


class CorruptFileError(QprlError):
    """Checkpoint file failed its integrity checks."""
