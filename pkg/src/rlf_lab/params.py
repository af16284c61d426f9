from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from .errors import ConfigurationError, UnsupportedExponentError

INTEGRATORS = ("euler", "rk4")


@dataclass(frozen=True)
class ExperimentParams:
    """Radii, exponents, horizons and discretisation controls of one experiment.

    The radii ``R``, ``R_tilde`` and ``R_prime`` are derived from the sup norms
    of the two fields and cannot be set directly.
    """

    p: float = 2.0
    r: float = 1.0
    T: float = 1.0
    tau: float = 1.0
    sup_b: float = 1.0
    sup_bt: float = 1.0
    dt: float = 1e-3
    lattice_size: int = 101
    bin_width: float = 0.1
    grid_size: int = 601
    integrator: str = "rk4"
    pair_count: int = 2000
    seed: int = 0
    safety: float = 2.0
    slack: float = 0.05
    dim: int = 2

    def __post_init__(self):
        if not self.p > 1 or not math.isfinite(self.p):
            raise UnsupportedExponentError(f"unsupported exponent p={self.p}; need 1 < p < inf")
        for name in ("r", "T", "tau", "dt", "bin_width"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigurationError(f"{name} must be positive and finite, got {v}")
        if self.tau > self.T:
            raise ConfigurationError(f"tau={self.tau} exceeds the field horizon T={self.T}")
        if self.sup_b < 0 or self.sup_bt < 0:
            raise ConfigurationError("sup norms must be nonnegative")
        if self.integrator not in INTEGRATORS:
            raise ConfigurationError(f"unknown integrator {self.integrator!r}")
        if self.lattice_size < 3 or self.grid_size < 3:
            raise ConfigurationError("lattice_size and grid_size must be >= 3")
        if self.pair_count < 1:
            raise ConfigurationError("pair_count must be >= 1")

    @classmethod
    def for_fields(cls, b, bt, **kwargs):
        return cls(sup_b=b.sup_norm, sup_bt=bt.sup_norm, dim=b.dim, **kwargs)

    @property
    def R(self):
        return self.r + self.T * self.sup_bt

    @property
    def R_tilde(self):
        return self.T * (self.sup_b + self.sup_bt)

    @property
    def R_prime(self):
        return self.r + 3 * self.T * max(self.sup_b, self.sup_bt)

    @property
    def lam(self):
        return self.R_tilde

    @property
    def box_half_width(self):
        # one extra lattice cell past B_{R' + R~}
        w = self.R_prime + self.R_tilde
        return w * (1.0 + 1.0 / (self.grid_size - 1))

    @property
    def quad_spacing(self):
        return 2 * self.r / (self.lattice_size - 1)

    def with_(self, **kwargs):
        return replace(self, **kwargs)

    def to_dict(self):
        d = asdict(self)
        d.update(R=self.R, R_tilde=self.R_tilde, R_prime=self.R_prime, lam=self.lam)
        return d
