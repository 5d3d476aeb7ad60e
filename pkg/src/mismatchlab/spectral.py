"""Spectral measures, Hilbert/R-transforms, and rank-one spherical integrals.

The limiting value of (1/n) log of the orthogonal-group average
exp(n Tr A U B U^T) with rank-one B is a variational expression in the
Hilbert transform of the limiting spectral measure of A.  This module holds
the measure abstraction (with the semicircle as the built-in instance), the
numeric R-transform, the three-case variational coefficient nu, the limit
itself, and the edge formulas for a rank-one additively deformed Wigner
matrix (outlier location and Hilbert-transform value at the edges).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

from scipy import integrate

from .asymptotics import InvalidParameterError


class OutOfRangeError(ValueError):
    """Argument outside the closure of the Hilbert-transform range."""


class LogDomainError(ValueError):
    """Nonpositive argument inside the logarithmic integrand."""


@dataclass(frozen=True)
class SpectralMeasure:
    """Compactly supported probability measure with density and Hilbert transform.

    density is the Lebesgue density on [support_min, support_max]; hilbert, if
    given, must be the closed-form map z -> int d mu(t)/(z - t) valid outside
    the support.  Without a closed form the transform falls back to adaptive
    quadrature with the edge-flattening substitution t = center + radius*sin(phi).
    """

    support_min: float
    support_max: float
    density: Callable[[float], float]
    hilbert: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if not self.support_min < self.support_max:
            raise InvalidParameterError("support_min must be below support_max")

    def _angular(self, f: Callable[[float], float]) -> float:
        # integrate f against the measure via t = c + r sin(phi); the cos(phi)
        # jacobian removes square-root edge behaviour of semicircle-like densities
        c = 0.5 * (self.support_min + self.support_max)
        r = 0.5 * (self.support_max - self.support_min)

        def g(phi: float) -> float:
            t = c + r * math.sin(phi)
            return f(t) * self.density(t) * r * math.cos(phi)

        val, _ = integrate.quad(g, -math.pi / 2, math.pi / 2, limit=200)
        return val

    def mass(self) -> float:
        return self._angular(lambda t: 1.0)

    def mean(self) -> float:
        return self._angular(lambda t: t)

    def hilbert_at(self, z: float) -> float:
        if self.support_min <= z <= self.support_max:
            raise OutOfRangeError(f"z={z} lies inside the support")
        if self.hilbert is not None:
            return self.hilbert(z)
        return self._angular(lambda t: 1.0 / (z - t))

    def edge_hilbert(self) -> tuple:
        """(h_min, h_max): one-sided Hilbert-transform limits at the support edges."""
        width = self.support_max - self.support_min
        if self.hilbert is not None:
            return (self.hilbert(self.support_min), self.hilbert(self.support_max))
        eps = 1e-8 * max(1.0, width)
        return (
            self.hilbert_at(self.support_min - eps),
            self.hilbert_at(self.support_max + eps),
        )


def semicircle_measure() -> SpectralMeasure:
    """Semicircle law on [-2, 2]: limiting spectrum of a normalised Wigner matrix."""

    def density(t: float) -> float:
        return math.sqrt(max(4.0 - t * t, 0.0)) / (2.0 * math.pi)

    def hilbert(z: float) -> float:
        if abs(z) < 2.0:
            raise OutOfRangeError(f"z={z} lies inside the support")
        return 0.5 * (z - math.copysign(math.sqrt(z * z - 4.0), z))

    return SpectralMeasure(-2.0, 2.0, density, hilbert)


# ---------------------------------------------------------------------------
# R-transform by monotone bisection
# ---------------------------------------------------------------------------

def r_transform(measure: SpectralMeasure, z: float) -> float:
    """R-transform: inverse Hilbert transform minus 1/z; z = 0 means the limit.

    The Hilbert transform is strictly decreasing on each component outside the
    support, so the inverse is found by bisection on [edge + eps, edge + Z]
    with Z grown geometrically until the bracket holds.
    """
    h_min, h_max = measure.edge_hilbert()
    if z == 0.0:
        return measure.mean()
    if z > 0:
        if z > h_max * (1.0 + 1e-12):
            raise OutOfRangeError(f"z={z} above the Hilbert range maximum {h_max}")
        edge, sign = measure.support_max, 1.0
        target_edge = h_max
    else:
        if z < h_min * (1.0 + 1e-12):
            raise OutOfRangeError(f"z={z} below the Hilbert range minimum {h_min}")
        edge, sign = measure.support_min, -1.0
        target_edge = h_min

    scale = max(1.0, abs(edge))
    eps = 1e-12 * scale
    lo = edge + sign * eps
    if (measure.hilbert_at(lo) - z) * sign <= 0.0:
        # z is within bisection resolution of the edge value
        return edge - 1.0 / z
    step = scale
    hi = edge + sign * step
    while (measure.hilbert_at(hi) - z) * sign > 0.0:
        step *= 2.0
        hi = edge + sign * step
        if step > 1e18:
            raise OutOfRangeError(f"failed to bracket Hilbert inverse for z={z}")

    lo_w, hi_w = (lo, hi) if sign > 0 else (hi, lo)
    for _ in range(200):
        mid = 0.5 * (lo_w + hi_w)
        if measure.hilbert_at(mid) > z:
            lo_w = mid
        else:
            hi_w = mid
        if hi_w - lo_w <= 1e-15 * max(1.0, abs(lo_w), abs(hi_w)):
            break
    w = 0.5 * (lo_w + hi_w)
    return w - 1.0 / z


# ---------------------------------------------------------------------------
# rank-one spherical-integral asymptotics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SphericalInput:
    """Data for the rank-one spherical-integral limit.

    theta is the nonzero eigenvalue of the rank-one factor; h_min/h_max are
    the Hilbert-transform values at the extreme eigenvalues gamma_min and
    gamma_max of the other factor.  The gammas default to the support edges
    of the bulk measure but may sit outside it (detached outlier), in which
    case h at that edge is the Hilbert transform evaluated there.
    """

    measure: SpectralMeasure
    theta: float
    h_min: float
    h_max: float
    gamma_min: float = field(default=math.nan)
    gamma_max: float = field(default=math.nan)

    def __post_init__(self):
        if math.isnan(self.gamma_min):
            object.__setattr__(self, "gamma_min", self.measure.support_min)
        if math.isnan(self.gamma_max):
            object.__setattr__(self, "gamma_max", self.measure.support_max)
        if self.gamma_min > self.measure.support_min or self.gamma_max < self.measure.support_max:
            raise InvalidParameterError("gammas cannot lie inside the bulk support")

    @classmethod
    def from_measure(cls, measure: SpectralMeasure, theta: float,
                     gamma_min: Optional[float] = None,
                     gamma_max: Optional[float] = None) -> "SphericalInput":
        g_lo = measure.support_min if gamma_min is None else gamma_min
        g_hi = measure.support_max if gamma_max is None else gamma_max
        if g_lo == measure.support_min and g_hi == measure.support_max:
            h_lo, h_hi = measure.edge_hilbert()
        else:
            h_lo = measure.edge_hilbert()[0] if g_lo == measure.support_min \
                else measure.hilbert_at(g_lo)
            h_hi = measure.edge_hilbert()[1] if g_hi == measure.support_max \
                else measure.hilbert_at(g_hi)
        return cls(measure, theta, h_lo, h_hi, g_lo, g_hi)

    def consistent(self, tol: float = 1e-6) -> bool:
        """Check h_min/h_max against the Hilbert transform near the gammas."""
        ref = SphericalInput.from_measure(self.measure, self.theta,
                                          self.gamma_min, self.gamma_max)
        return (abs(ref.h_min - self.h_min) <= tol * max(1.0, abs(self.h_min))
                and abs(ref.h_max - self.h_max) <= tol * max(1.0, abs(self.h_max)))


def spherical_nu(inp: SphericalInput) -> float:
    """Variational coefficient of the rank-one spherical-integral limit.

    Equals the R-transform at 2 theta while that point stays inside the
    Hilbert range, and saturates at gamma_edge - 1/(2 theta) beyond it.
    """
    if inp.theta == 0.0:
        raise InvalidParameterError("theta must be nonzero")
    two_theta = 2.0 * inp.theta
    if inp.h_min <= two_theta <= inp.h_max:
        return r_transform(inp.measure, two_theta)
    if two_theta > inp.h_max:
        return inp.gamma_max - 1.0 / two_theta
    return inp.gamma_min - 1.0 / two_theta


def spherical_integral_limit(inp: SphericalInput) -> float:
    """Limit of (1/n) log of the rank-one orthogonal spherical integral.

    theta*nu - (1/2) int log(1 + 2 theta nu - 2 theta t) d mu(t); the log
    argument is positive on the open support and may vanish only at an edge
    (integrable because the density vanishes there too).
    """
    if inp.theta == 0.0:
        return 0.0
    theta = inp.theta
    nu = spherical_nu(inp)
    shift = 1.0 + 2.0 * theta * nu

    lo = shift - 2.0 * theta * inp.measure.support_max
    hi = shift - 2.0 * theta * inp.measure.support_min
    if min(lo, hi) < -1e-10 * max(1.0, abs(shift)):
        raise LogDomainError(
            f"log argument negative on the support (min {min(lo, hi)}); "
            "inconsistent input data"
        )

    def log_term(t: float) -> float:
        arg = shift - 2.0 * theta * t
        if arg <= 0.0:
            return 0.0  # measure-zero edge point; density vanishes there
        return math.log(arg)

    integral = inp.measure._angular(log_term)
    return theta * nu - 0.5 * integral


# ---------------------------------------------------------------------------
# rank-one deformed Wigner edges
# ---------------------------------------------------------------------------

def deformed_edge(snr_strength: float) -> tuple:
    """Edge data of a normalised Wigner matrix plus a rank-one spike.

    snr_strength is the almost-sure limit of sqrt(lam) |s|^2 / n, i.e.
    sqrt(lam) sigma^2.  Below 1 the spike is swallowed by the bulk; above 1
    the top eigenvalue detaches to w + 1/w and the Hilbert value there is 1/w.

    Returns (gamma_min, gamma_max, h_min, h_max).
    """
    if snr_strength < 0 or not math.isfinite(snr_strength):
        raise InvalidParameterError(f"snr_strength must be nonnegative, got {snr_strength}")
    if snr_strength <= 1.0:
        return (-2.0, 2.0, -1.0, 1.0)
    w = snr_strength
    return (-2.0, w + 1.0 / w, -1.0, 1.0 / w)
