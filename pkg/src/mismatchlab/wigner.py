"""Finite-size machinery: spiked Wigner sampling and sphere-average integrals.

Conventions: the observation is Y = sqrt(lam/n) s s^T + Z with s_i iid
N(0, sigma^2) and Z symmetric, N(0, 1) off-diagonal and N(0, 2) on the
diagonal.  The diagonal variance 2 is deliberate; it matters for finite-n
error measurements.  Randomness is keyed by (seed, stream) pairs so that
trial t always consumes stream t, independent of scheduling.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .asymptotics import InvalidParameterError


class EigensolverError(RuntimeError):
    """Symmetric eigendecomposition failed to converge."""


class DegenerateInputError(ValueError):
    """Input too small for the requested operation."""


@dataclass(frozen=True)
class RngSpec:
    """Reproducible random stream: same (seed, stream) -> bit-identical draws."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64) or not (0 <= self.stream < 2**64):
            raise InvalidParameterError("seed and stream must fit in 64 bits")

    def generator(self, *subkeys: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, self.stream, *subkeys])
        )

    def child(self, stream: int) -> "RngSpec":
        return RngSpec(self.seed, stream)


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo scalar with its standard error and sample count."""

    mean: float
    std_error: float
    n_samples: int

    @classmethod
    def from_samples(cls, samples) -> "Estimate":
        x = np.asarray(samples, dtype=float)
        if x.size < 2:
            raise DegenerateInputError("need at least two samples")
        return cls(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), int(x.size))


@dataclass(frozen=True)
class SpikedInstance:
    """One draw of the spiked model with its eigendecomposition attached."""

    n: int
    sigma: float
    lam: float
    rng: RngSpec
    s: np.ndarray          # signal vector, length n
    y: np.ndarray          # symmetric observation matrix
    eigvals: np.ndarray    # eigenvalues of y, descending
    eigvecs: np.ndarray    # orthogonal; columns match eigvals


def symmetric_eig(m: np.ndarray) -> tuple:
    """Full symmetric eigendecomposition, eigenvalues descending.

    Delegates to LAPACK (Householder tridiagonalisation + implicit QL/QR).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidParameterError(f"expected a square matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InvalidParameterError("matrix entries must be finite")
    if not np.array_equal(m, m.T):
        raise InvalidParameterError("matrix must be exactly symmetric")
    try:
        w, q = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(str(exc)) from exc
    order = np.argsort(w)[::-1]
    return np.ascontiguousarray(w[order]), np.ascontiguousarray(q[:, order])


def sample_instance(n: int, sigma: float, lam: float, rng: RngSpec) -> SpikedInstance:
    """Draw one spiked instance and attach its eigendecomposition.

    Draw order is fixed (signal, strict upper triangle row-major, diagonal) so
    the instance is a pure function of the RngSpec.
    """
    if n < 2:
        raise DegenerateInputError(f"n must be at least 2, got {n}")
    if not (sigma > 0 and lam >= 0):
        raise InvalidParameterError("need sigma > 0 and lam >= 0")
    gen = rng.generator()
    s = sigma * gen.standard_normal(n)
    iu = np.triu_indices(n, k=1)
    z = np.zeros((n, n))
    z[iu] = gen.standard_normal(iu[0].size)
    z = z + z.T
    z[np.diag_indices(n)] = math.sqrt(2.0) * gen.standard_normal(n)
    y = math.sqrt(lam / n) * np.outer(s, s) + z
    eigvals, eigvecs = symmetric_eig(y)
    return SpikedInstance(n=n, sigma=sigma, lam=lam, rng=rng,
                          s=s, y=y, eigvals=eigvals, eigvecs=eigvecs)


# ---------------------------------------------------------------------------
# rank-one spherical integral at finite n
# ---------------------------------------------------------------------------

def _saddle_tilt(eigvals: np.ndarray, theta: float) -> np.ndarray:
    """Per-coordinate variances of the proposal Gaussian for the sphere average.

    Solves (1/n) sum 1/(w - gamma_i) = 2 theta for w outside the spectrum and
    returns d_i proportional to 1/(w - gamma_i).  Any positive d gives an
    unbiased estimator; this choice keeps the log-weights O(1) in n.
    """
    n = eigvals.size
    if theta > 0:
        edge = float(eigvals.max())
        sgn = 1.0
    else:
        edge = float(eigvals.min())
        sgn = -1.0
    target = 2.0 * abs(theta)

    def mean_resolvent(offset: float) -> float:
        return float(np.mean(1.0 / (offset + sgn * (edge - eigvals)))) / 1.0

    # bracket in the offset w - edge (positive); mean resolvent decreases in it
    lo = 1e-14 * max(1.0, abs(edge))
    while mean_resolvent(lo) < target and lo > 1e-300:
        lo *= 1e-2
    hi = max(1.0, 1.0 / target)
    while mean_resolvent(hi) > target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_resolvent(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    offset = 0.5 * (lo + hi)
    return 1.0 / (offset + sgn * (edge - eigvals))


def hciz_rank1_mc(eigvals: np.ndarray, theta: float, samples: int, rng: RngSpec,
                  tilted: bool = True, block: int = 1 << 22) -> Estimate:
    """Monte Carlo sphere average estimating (1/n) log I_n for rank-one B.

    I_n reduces to E_u[exp(n theta sum_i gamma_i u_i^2)] over the uniform unit
    sphere.  With tilted=True the expectation is importance-sampled from an
    anisotropic Gaussian direction matched to the integrand's saddle point,
    with the exact density ratio det(D)^(1/2) (u^T D^-1 u)^(n/2) as weight;
    the estimator stays an unbiased sphere average but its log-weights remain
    O(1) as n grows, which plain uniform sampling cannot achieve once the
    integrand's dominant directions are exponentially rare.  tilted=False
    draws u as a normalised standard Gaussian vector.

    Returns the log-mean-exp divided by n, with a delete-one jackknife
    standard error.  Exponentials are max-shifted; no overflow occurs for
    |theta| * max|gamma| up to 50 and far beyond.
    """
    gamma = np.asarray(eigvals, dtype=float)
    n = gamma.size
    if n < 2:
        raise DegenerateInputError("need at least two eigenvalues")
    if samples < 2:
        raise InvalidParameterError("need at least two Monte Carlo samples")
    if theta == 0.0:
        return Estimate(0.0, 0.0, samples)

    if tilted:
        d = _saddle_tilt(gamma, theta)
        half_logdet = 0.5 * float(np.sum(np.log(d)))
        sqrt_d = np.sqrt(d)
        inv_d = 1.0 / d
    gen = rng.generator()

    log_terms = np.empty(samples)
    done = 0
    per_block = max(1, block // n)
    while done < samples:
        m = min(per_block, samples - done)
        g = gen.standard_normal((m, n))
        if tilted:
            x = g * sqrt_d
            norm2 = np.einsum("ij,ij->i", x, x)
            q = (x * x) @ gamma / norm2
            quad_inv = (x * x) @ inv_d / norm2
            log_terms[done:done + m] = (
                n * theta * q + 0.5 * n * np.log(quad_inv) + half_logdet
            )
        else:
            norm2 = np.einsum("ij,ij->i", g, g)
            q = (g * g) @ gamma / norm2
            log_terms[done:done + m] = n * theta * q
        done += m

    shift = log_terms.max()
    exps = np.exp(log_terms - shift)
    total = exps.sum()
    log_mean = shift + math.log(total / samples)

    # delete-one jackknife of the log-mean-exp
    loo = shift + np.log((total - exps) / (samples - 1))
    se = math.sqrt((samples - 1) / samples * float(np.sum((loo - loo.mean()) ** 2)))
    return Estimate(log_mean / n, se / n, samples)


# ---------------------------------------------------------------------------
# instance cache format
# ---------------------------------------------------------------------------

_MAGIC = b"SPWG1"


def save_spiked(instance: SpikedInstance, path) -> None:
    """Dump (n, seed, lam, sigma, eigvals) little-endian with a magic header."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQdd", instance.n, instance.rng.seed,
                             instance.lam, instance.sigma))
        fh.write(np.asarray(instance.eigvals, dtype="<f8").tobytes())


def load_spiked(path) -> dict:
    """Read a dump written by save_spiked; returns a plain dict."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise InvalidParameterError(f"bad magic bytes {magic!r}")
        n, seed, lam, sigma = struct.unpack("<QQdd", fh.read(32))
        eigvals = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(float)
    if eigvals.size != n:
        raise InvalidParameterError("truncated eigenvalue payload")
    return {"n": int(n), "seed": int(seed), "lam": lam, "sigma": sigma,
            "eigvals": eigvals}
