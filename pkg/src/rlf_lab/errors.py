"""Exception types raised by the library."""


class RLFLabError(Exception):
    """Base class for all library errors."""


class InvalidInputError(RLFLabError, ValueError):
    """Non-finite or otherwise malformed numerical input."""


class ConfigurationError(RLFLabError, ValueError):
    """Bad parameters, unknown modes or inconsistent settings."""


class UnsupportedExponentError(ConfigurationError):
    """Raised for exponents p <= 1."""


class DegenerateRadiusError(ConfigurationError):
    """Maximal-function radius smaller than the grid spacing."""


class InvalidDeltaError(InvalidInputError):
    """Non-positive normalisation constant for the log functional."""


class LogSignError(InvalidInputError):
    """delta >= 1, so |log delta| no longer decreases with delta."""


class IncompatibleEnsemblesError(InvalidInputError):
    """Ensembles that do not share initial points and time grid."""


class IntegrationDivergedError(RLFLabError, RuntimeError):
    """A trajectory produced a non-finite state."""

    def __init__(self, particle, step):
        self.particle = int(particle)
        self.step = int(step)
        super().__init__(
            f"integration diverged: particle {self.particle} became non-finite at step {self.step}"
        )
