"""Rayleigh block-fading SNR law and the Gaussian-input capacity map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import DomainError

LOG2E = 1.0 / math.log(2.0)


def capacity(snr):
    """Return log2(1 + snr) in bits per channel use.

    Accepts scalars or arrays; negative SNR raises :class:`DomainError`.
    """
    x = np.asarray(snr, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError(f"snr must be nonnegative, got {snr!r}")
    out = np.log1p(x) * LOG2E
    return float(out) if out.ndim == 0 else out


def db_to_linear(snr_db):
    return 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0)


def linear_to_db(snr):
    return 10.0 * np.log10(snr)


@dataclass(frozen=True)
class ChannelModel:
    """Exponentially distributed SNR (Rayleigh amplitude) with mean ``mean_snr``.

    All quantities are on the linear scale.
    """

    mean_snr: float

    def __post_init__(self):
        if not (self.mean_snr > 0 and math.isfinite(self.mean_snr)):
            raise DomainError(f"mean_snr must be positive and finite, got {self.mean_snr!r}")

    @classmethod
    def from_db(cls, snr_db: float) -> "ChannelModel":
        return cls(float(db_to_linear(snr_db)))

    def pdf(self, x):
        x = _nonneg(x, "x")
        out = np.exp(-x / self.mean_snr) / self.mean_snr
        return float(out) if out.ndim == 0 else out

    def cdf(self, x):
        x = _nonneg(x, "x")
        out = -np.expm1(-x / self.mean_snr)
        return float(out) if out.ndim == 0 else out

    def sf(self, x):
        """Survival function 1 - cdf(x), accurate in the far tail."""
        x = _nonneg(x, "x")
        out = np.exp(-x / self.mean_snr)
        return float(out) if out.ndim == 0 else out

    def inv_cdf(self, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0) or np.any(u >= 1) or np.any(np.isnan(u)):
            raise DomainError(f"u must lie in [0, 1), got {u!r}")
        out = -self.mean_snr * np.log1p(-u)
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        """Draw i.i.d. SNR values by inverse-cdf transform of ``rng.random``."""
        return self.inv_cdf(rng.random(size))

    def ergodic_capacity(self) -> float:
        """E[log2(1 + snr)], integrated over u = cdf(snr) on [0, 1]."""
        g = self.mean_snr

        def integrand(u):
            return math.log1p(-g * math.log1p(-u)) * LOG2E

        value, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=0.0, epsrel=1e-10, limit=200)
        return value

    def ergodic_capacity_closed_form(self) -> float:
        """log2(e) * exp(1/mean) * E1(1/mean), evaluated without overflow."""
        z = 1.0 / self.mean_snr
        # exp(z) * E1(z) == scaled exp1; special.exp1 overflows the product for large z
        if z < 700:
            return LOG2E * math.exp(z) * float(special.exp1(z))
        # asymptotic series of exp(z) E1(z)
        return LOG2E * (1.0 / z) * (1 - 1 / z + 2 / z**2 - 6 / z**3)


def _nonneg(x, name):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise DomainError(f"{name} must be nonnegative, got {x!r}")
    return x
