"""Closed-form large-n quantities for mismatched rank-one matrix estimation.

A rank-one signal s s^T (s_i iid N(0, sigma^2)) is observed through additive
Gaussian noise at signal-to-noise ratio lam, while the estimator's posterior
assumes prior width sigma_p and SNR lam_p.  This module evaluates the limiting
mean squared error of the posterior-mean estimator, the limiting free energy,
the Bayes-optimal error, the matched-SNR specialisations, and the analytic
consistency checks that tie them together (a differential identity relating
free-energy derivatives to the MSE, and an integral sum rule whose value is a
Gaussian Kullback-Leibler divergence).

Everything here is a pure function of the four scalars; the piecewise
expressions are continuous across their branch boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Optional

from scipy import integrate


class InvalidParameterError(ValueError):
    """Raised when a parameter violates its domain (e.g. sigma <= 0)."""


class BoundaryProximityError(ValueError):
    """Raised when a finite-difference stencil straddles a branch boundary."""


class QuadratureError(RuntimeError):
    """Raised when adaptive quadrature fails to reach its tolerance."""


class NoRootError(RuntimeError):
    """Raised when a curve bracket cannot be established on the grid range."""


# ---------------------------------------------------------------------------
# parameters and regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemParams:
    """True and assumed parameters of one mismatched instance.

    sigma, lam describe the data generating process; sigma_p, lam_p are what
    the estimator plugs into its posterior.  lam_p and the widths must be
    strictly positive because the closed forms divide by them; lam = 0 (pure
    noise) is allowed.
    """

    sigma: float
    sigma_p: float
    lam: float
    lam_p: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise InvalidParameterError(f"sigma must be positive, got {self.sigma}")
        if not (self.sigma_p > 0 and math.isfinite(self.sigma_p)):
            raise InvalidParameterError(f"sigma_p must be positive, got {self.sigma_p}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise InvalidParameterError(f"lam must be nonnegative, got {self.lam}")
        if not (self.lam_p > 0 and math.isfinite(self.lam_p)):
            raise InvalidParameterError(f"lam_p must be positive, got {self.lam_p}")

    def matched(self) -> bool:
        return self.sigma == self.sigma_p and self.lam == self.lam_p


class Region(Enum):
    """Branch of the piecewise limit formulas that applies to a parameter point.

    LOW_TRUE_HIGH_ASSUMED: weak true signal, estimator confident anyway.
    INFORMATIVE: the posterior mean carries information about the spike.
    UNINFORMATIVE: estimation no better than the prior; MSE = sigma^4.
    """

    LOW_TRUE_HIGH_ASSUMED = "A"
    INFORMATIVE = "B"
    UNINFORMATIVE = "C"

    @property
    def label(self) -> str:
        return self.value


def classify_region(p: ProblemParams) -> Region:
    """Select the applicable branch; ties broken A before B before C.

    Branch values coincide on shared boundaries, so the tie-break never
    changes a downstream number.
    """
    if p.lam <= 1.0 / p.sigma**4 and p.lam_p >= 1.0 / p.sigma_p**4:
        return Region.LOW_TRUE_HIGH_ASSUMED
    if p.lam >= 1.0 / p.sigma**4 and math.sqrt(p.lam * p.lam_p) >= 1.0 / (p.sigma**2 * p.sigma_p**2):
        return Region.INFORMATIVE
    return Region.UNINFORMATIVE


# ---------------------------------------------------------------------------
# branch expressions (exposed for boundary-continuity validation)
# ---------------------------------------------------------------------------

def asymptotic_mse_branch(region: Region, p: ProblemParams) -> float:
    """Evaluate one branch of the limiting MSE regardless of where p lies."""
    s, sp, l, lp = p.sigma, p.sigma_p, p.lam, p.lam_p
    if region is Region.LOW_TRUE_HIGH_ASSUMED:
        return s**4 + (1.0 / math.sqrt(lp) - 1.0 / (lp * sp**2)) ** 2
    if region is Region.INFORMATIVE:
        r = math.sqrt(l / lp)
        return (
            s**4 * (1.0 - r) ** 2
            + 2.0 / math.sqrt(l * lp)
            + 1.0 / (lp**2 * sp**4)
            + (2.0 / lp) * (s**2 / sp**2) * (1.0 - r)
            - 2.0 / (l * lp * s**2 * sp**2)
        )
    return s**4


def asymptotic_free_energy_branch(region: Region, p: ProblemParams) -> float:
    """Evaluate one branch of the limiting free energy regardless of region."""
    s, sp, l, lp = p.sigma, p.sigma_p, p.lam, p.lam_p
    if region is Region.LOW_TRUE_HIGH_ASSUMED:
        return (
            -1.0 / (4.0 * lp * sp**4)
            + 1.0 / (math.sqrt(lp) * sp**2)
            - 0.75
            + 0.25 * math.log(lp)
            + math.log(sp)
        )
    if region is Region.INFORMATIVE:
        return (
            0.5 * math.log(math.sqrt(l * lp) * s**2 * sp**2)
            - 1.0 / (4.0 * lp * sp**4)
            - l * s**4 / 4.0
            + math.sqrt(l / lp) * s**2 / (2.0 * sp**2)
            + 1.0 / (2.0 * math.sqrt(l * lp) * s**2 * sp**2)
            - 0.5
        )
    return 0.0


def asymptotic_mse(p: ProblemParams) -> float:
    """Limiting mean squared error of the mismatched posterior-mean estimator."""
    return asymptotic_mse_branch(classify_region(p), p)


def asymptotic_free_energy(p: ProblemParams) -> float:
    """Limiting free energy (minus the normalised expected log partition function)."""
    return asymptotic_free_energy_branch(classify_region(p), p)


# ---------------------------------------------------------------------------
# Bayes-optimal and matched-SNR specialisations
# ---------------------------------------------------------------------------

def mmse(sigma: float, lam: float) -> float:
    """Minimum (Bayes-optimal) limiting error at true parameters (sigma, lam)."""
    if not (sigma > 0):
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    if not (lam >= 0):
        raise InvalidParameterError(f"lam must be nonnegative, got {lam}")
    if lam <= 1.0 / sigma**4:
        return sigma**4
    return 2.0 / lam - 1.0 / (lam**2 * sigma**4)


def matched_snr_mse(sigma: float, sigma_p: float, lam: float) -> float:
    """Limiting MSE when the estimator knows the SNR but not the prior width.

    Equals asymptotic_mse with lam_p = lam for every input; kept as a separate
    evaluation path so the two can be checked against each other.
    """
    if not (sigma > 0 and sigma_p > 0):
        raise InvalidParameterError("sigma and sigma_p must be positive")
    if not (lam >= 0):
        raise InvalidParameterError(f"lam must be nonnegative, got {lam}")
    if sigma_p <= sigma:
        if lam <= 1.0 / (sigma**2 * sigma_p**2):
            return sigma**4
        return 2.0 / lam - (1.0 / (lam**2 * sigma_p**2)) * (2.0 / sigma**2 - 1.0 / sigma_p**2)
    if lam <= 1.0 / sigma_p**4:
        return sigma**4
    if lam <= 1.0 / sigma**4:
        return sigma**4 + 1.0 / lam - (1.0 / (lam**1.5 * sigma_p**2)) * (
            2.0 - 1.0 / (math.sqrt(lam) * sigma_p**2)
        )
    return 2.0 / lam - (1.0 / (lam**2 * sigma_p**2)) * (2.0 / sigma**2 - 1.0 / sigma_p**2)


def kl_gaussian(sigma: float, sigma_p: float) -> float:
    """KL divergence of N(0, sigma^2) from N(0, sigma_p^2)."""
    if not (sigma > 0 and sigma_p > 0):
        raise InvalidParameterError("sigma and sigma_p must be positive")
    return math.log(sigma_p / sigma) + sigma**2 / (2.0 * sigma_p**2) - 0.5


# ---------------------------------------------------------------------------
# sum rule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureConfig:
    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    limit: int = 200

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0 or self.limit < 10:
            raise InvalidParameterError("invalid quadrature configuration")


def sum_rule_residual(sigma: float, sigma_p: float,
                      quad: QuadratureConfig = QuadratureConfig()) -> float:
    """Integral of (matched-SNR MSE - MMSE) over all SNRs, minus 4x Gaussian KL.

    The upper limit is handled by the substitution lam = t/(1-t); the
    integrand decays like 1/lam^2 so the transformed integrand is bounded.
    Branch kinks are passed to the quadrature as breakpoints.
    """
    target = 4.0 * kl_gaussian(sigma, sigma_p)

    def integrand(t: float) -> float:
        if t >= 1.0:
            return 0.0
        lam = t / (1.0 - t)
        if lam <= 0.0:
            return 0.0
        val = matched_snr_mse(sigma, sigma_p, lam) - mmse(sigma, lam)
        return val / (1.0 - t) ** 2

    kinks = sorted({1.0 / (sigma**2 * sigma_p**2), 1.0 / sigma_p**4, 1.0 / sigma**4})
    points = [k / (1.0 + k) for k in kinks if k > 0]
    result = integrate.quad(
        integrand, 0.0, 1.0,
        points=points,
        epsabs=quad.abs_tol, epsrel=quad.rel_tol, limit=quad.limit,
        full_output=1,
    )
    if len(result) > 3:
        raise QuadratureError(f"sum-rule quadrature did not converge: {result[3]}")
    value, abserr = result[0], result[1]
    if abserr > 100.0 * max(quad.abs_tol, quad.rel_tol * max(1.0, abs(value))):
        raise QuadratureError(f"sum-rule quadrature error estimate too large: {abserr}")
    return value - target


# ---------------------------------------------------------------------------
# free-energy / MSE differential identity
# ---------------------------------------------------------------------------

def free_energy_mse_residual(p: ProblemParams, h: Optional[float] = None) -> float:
    """Residual of the identity tying free-energy derivatives to the MSE.

    Evaluates d/dlam_p f + (2 - r) r d/dlam f + sigma^4/4 - MSE/4 with
    r = sqrt(lam/lam_p), the partials taken as central finite differences of
    the closed-form free energy with step h.  Vanishes like O(h^2) at interior
    points; the formulas are not smooth across branch boundaries, so stencils
    that straddle one are rejected.
    """
    if h is None:
        h = 1e-4 * max(1.0, p.lam, p.lam_p)
    if h <= 0:
        raise InvalidParameterError(f"step must be positive, got {h}")
    if p.lam - h <= 0 or p.lam_p - h <= 0:
        raise BoundaryProximityError("stencil leaves the positive-parameter domain")

    center = classify_region(p)
    stencil = [
        ProblemParams(p.sigma, p.sigma_p, p.lam + h, p.lam_p),
        ProblemParams(p.sigma, p.sigma_p, p.lam - h, p.lam_p),
        ProblemParams(p.sigma, p.sigma_p, p.lam, p.lam_p + h),
        ProblemParams(p.sigma, p.sigma_p, p.lam, p.lam_p - h),
    ]
    if any(classify_region(q) is not center for q in stencil):
        raise BoundaryProximityError(
            f"stencil with h={h} straddles a region boundary at {p}"
        )

    f = asymptotic_free_energy
    df_dl = (f(stencil[0]) - f(stencil[1])) / (2.0 * h)
    df_dlp = (f(stencil[2]) - f(stencil[3])) / (2.0 * h)
    r = math.sqrt(p.lam / p.lam_p)
    lhs = df_dlp + (2.0 - r) * r * df_dl + p.sigma**4 / 4.0
    return lhs - asymptotic_mse(p) / 4.0


# ---------------------------------------------------------------------------
# curves of the (sigma_p, lam_p) phase diagram
# ---------------------------------------------------------------------------

class CurveKind(Enum):
    PHASE_BOUNDARY = "phase_boundary"
    MSE_EQUALS_PRIOR = "mse_equals_prior"
    MSE_EQUALS_MMSE = "mse_equals_mmse"


@dataclass(frozen=True)
class CurveSpec:
    """One curve of the phase diagram at fixed true parameters (sigma, lam).

    sweep_axis names the coordinate that runs over the supplied grid; the
    other coordinate is solved for.
    """

    kind: CurveKind
    sigma: float
    lam: float
    sweep_axis: str = "sigma_p"

    def __post_init__(self):
        if self.sweep_axis not in ("sigma_p", "lambda_p"):
            raise InvalidParameterError(f"unknown sweep axis {self.sweep_axis!r}")
        if not (self.sigma > 0 and self.lam >= 0):
            raise InvalidParameterError("sigma must be positive and lam nonnegative")


_REL_TOL = 1e-10


def _bisect(f: Callable[[float], float], lo: float, hi: float) -> float:
    """Plain bisection on a bracketing interval, to relative width _REL_TOL."""
    flo = f(lo)
    if flo == 0.0:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= _REL_TOL * max(1.0, abs(lo), abs(hi)):
            break
    return 0.5 * (lo + hi)


def _golden_min(f: Callable[[float], float], lo: float, hi: float) -> float:
    """Golden-section minimisation (bracketing only; the target is C0 piecewise)."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(300):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
        if b - a <= _REL_TOL * max(1.0, abs(a), abs(b)):
            break
    return 0.5 * (a + b)


def _mse_at(spec: CurveSpec, sigma_p: float, lam_p: float) -> float:
    return asymptotic_mse(ProblemParams(spec.sigma, sigma_p, spec.lam, lam_p))


def _informative_lower_edge(spec: CurveSpec, fixed: float) -> float:
    """Smallest free-coordinate value on the informative-region slice."""
    s, l = spec.sigma, spec.lam
    if spec.sweep_axis == "sigma_p":
        sp = fixed
        if l * s**4 >= 1.0:
            return 1.0 / (l * s**4 * sp**4)      # lam_p on the transition line
        return 1.0 / sp**4                        # lam_p on the A/C edge
    lp = fixed
    if l * s**4 >= 1.0:
        return (l * lp * s**4) ** -0.25           # sigma_p on the transition line
    return lp ** -0.25


def _curve_value(spec: CurveSpec, fixed: float, free: float) -> float:
    if spec.sweep_axis == "sigma_p":
        return _mse_at(spec, fixed, free)
    return _mse_at(spec, free, fixed)


def _curve_point(spec: CurveSpec, fixed: float) -> Optional[tuple]:
    """Solve for the free coordinate at one grid value; None when no root."""
    s, l = spec.sigma, spec.lam
    sweep_sigma = spec.sweep_axis == "sigma_p"

    def as_point(free: float) -> tuple:
        return (fixed, free) if sweep_sigma else (free, fixed)

    if spec.kind is CurveKind.PHASE_BOUNDARY:
        if sweep_sigma:
            sp = fixed
            if l * s**4 >= 1.0:
                cond = lambda lp: math.sqrt(l * lp) * s**2 * sp**2 - 1.0
            else:
                cond = lambda lp: lp * sp**4 - 1.0
        else:
            lp = fixed
            if l * s**4 >= 1.0:
                cond = lambda sp: math.sqrt(l * lp) * s**2 * sp**2 - 1.0
            else:
                cond = lambda sp: lp * sp**4 - 1.0
        lo, hi = 1e-18, 1.0
        while cond(hi) < 0 and hi < 1e18:
            hi *= 4.0
        if cond(hi) < 0 or cond(lo) > 0:
            return None
        return as_point(_bisect(cond, lo, hi))

    edge = _informative_lower_edge(spec, fixed)
    lo = edge * (1.0 + 1e-9)
    hi = max(1e4, 1e3 * edge, 100.0 * max(l, 1.0))
    objective = lambda x: _curve_value(spec, fixed, x)

    # locate the valley floor of the MSE along this slice
    scan = [lo * (hi / lo) ** (k / 160.0) for k in range(161)]
    vals = [objective(x) for x in scan]
    k0 = min(range(len(scan)), key=vals.__getitem__)
    a = scan[max(k0 - 1, 0)]
    b = scan[min(k0 + 1, len(scan) - 1)]
    x_min = _golden_min(objective, a, b)
    f_min = objective(x_min)

    if spec.kind is CurveKind.MSE_EQUALS_MMSE:
        # The MSE dominates the MMSE everywhere and touches it on this curve,
        # so the locus is a valley of tangential minima: locate the minimiser
        # and accept it only if the optimal value is attained.
        target = mmse(s, l)
        if abs(f_min - target) <= 1e-9 * max(1.0, target):
            return as_point(x_min)
        return None

    # MSE_EQUALS_PRIOR: transversal crossing of the level sigma^4, away from
    # the region edge (where the value is sigma^4 trivially by continuity).
    target = s**4
    g = lambda x: objective(x) - target
    start = edge * (1.0 + 1e-6)
    lo_scan, hi_scan = start, hi
    prev_x, prev_g = lo_scan, g(lo_scan)
    if abs(prev_g) <= 1e-13 * max(1.0, target):
        return None
    bracket = None
    for k in range(1, 481):
        x = lo_scan * (hi_scan / lo_scan) ** (k / 480.0)
        gx = g(x)
        if gx == 0.0:
            return as_point(x)
        if (gx > 0) != (prev_g > 0):
            bracket = (prev_x, x)
            break
        prev_x, prev_g = x, gx
    if bracket is None:
        return None
    return as_point(_bisect(g, *bracket))


def phase_curve(spec: CurveSpec, grid: Iterable[float]) -> list:
    """Trace one diagram curve over a grid of sweep-axis values.

    Returns (sigma_p, lam_p) pairs; grid values where the curve does not
    exist contribute nothing.  Raises NoRootError when the whole grid is
    empty, which signals a bracket that cannot be established.
    """
    points = []
    for fixed in grid:
        if not (fixed > 0):
            raise InvalidParameterError(f"grid values must be positive, got {fixed}")
        pt = _curve_point(spec, fixed)
        if pt is not None:
            points.append(pt)
    if not points:
        raise NoRootError(f"no {spec.kind.value} root anywhere on the grid")
    return points
