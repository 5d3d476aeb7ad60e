"""Finite-n mismatched posterior: sampling, moments, and experiments.

The estimator's posterior for a spiked observation Y is, up to normalisation,
exp(-|x|^2/(2 sigma_p^2) - (lam_p/(4n)) |x|^4 + (1/2) sqrt(lam_p/n) x^T Y x).
In the eigenbasis of Y the density is even in every coordinate separately, so
all off-diagonal second moments vanish exactly and the outer-product estimate
reduces to per-eigendirection second moments (a Rao-Blackwellisation that
removes O(n) variance from the Frobenius error).

Chains are MALA (gradient-informed Gaussian proposal with a Metropolis
correction) run directly in the eigenbasis, where one step costs O(n).

Stream layout: an experiment rooted at RngSpec(seed, stream) gives trial t
the leaf stream `stream + 1 + 1024*t` for its instance, sub-streams inside
that block for per-trial Monte Carlo, and 4-part seed keys for chains; the
result is a pure function of (seed, stream) regardless of scheduling.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .asymptotics import InvalidParameterError, ProblemParams, asymptotic_mse
from .wigner import Estimate, RngSpec, SpikedInstance, hciz_rank1_mc, sample_instance


class ChainConvergenceError(RuntimeError):
    """Split-chain diagnostic exceeded its threshold."""


class DimensionTooLargeError(ValueError):
    """Dense quadrature requested above its dimension cap."""


_TRIAL_BLOCK = 1024


def _trial_stream(rng: RngSpec, trial: int, offset: int = 0) -> RngSpec:
    if not 0 <= offset < _TRIAL_BLOCK:
        raise InvalidParameterError("per-trial stream offset out of range")
    return RngSpec(rng.seed, rng.stream + 1 + _TRIAL_BLOCK * trial + offset)


@dataclass(frozen=True)
class PosteriorSpec:
    """One posterior: an observed instance plus the assumed (sigma_p, lam_p).

    lam_p = 0 is allowed here (the posterior degenerates to the prior), even
    though the closed-form limits require lam_p > 0.
    """

    instance: SpikedInstance
    sigma_p: float
    lam_p: float

    def __post_init__(self):
        if not (self.sigma_p > 0):
            raise InvalidParameterError(f"sigma_p must be positive, got {self.sigma_p}")
        if not (self.lam_p >= 0):
            raise InvalidParameterError(f"lam_p must be nonnegative, got {self.lam_p}")


def log_posterior(spec: PosteriorSpec, x: np.ndarray) -> float:
    """Unnormalised log posterior density at x (original basis)."""
    x = np.asarray(x, dtype=float)
    n = spec.instance.n
    norm2 = float(x @ x)
    quad = float(x @ (spec.instance.y @ x))
    return (
        -norm2 / (2.0 * spec.sigma_p**2)
        - spec.lam_p * norm2**2 / (4.0 * n)
        + 0.5 * math.sqrt(spec.lam_p / n) * quad
    )


def log_posterior_grad(spec: PosteriorSpec, x: np.ndarray) -> tuple:
    """(value, gradient) of the unnormalised log posterior at x."""
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise InvalidParameterError("x must be finite")
    n = spec.instance.n
    norm2 = float(x @ x)
    yx = spec.instance.y @ x
    value = (
        -norm2 / (2.0 * spec.sigma_p**2)
        - spec.lam_p * norm2**2 / (4.0 * n)
        + 0.5 * math.sqrt(spec.lam_p / n) * float(x @ yx)
    )
    grad = (
        -x / spec.sigma_p**2
        - (spec.lam_p / n) * norm2 * x
        + math.sqrt(spec.lam_p / n) * yx
    )
    return value, grad


@dataclass(frozen=True)
class ChainConfig:
    """MALA run lengths and adaptation targets.

    At least four chains are required so the split diagnostic sees runs
    started from deliberately different radii (the radial profile can be
    bimodal near phase boundaries).
    """

    n_chains: int = 4
    burn_in: int = 2000
    n_samples: int = 4000
    target_accept: float = 0.574
    step_init: float = 0.25
    rng: RngSpec = field(default_factory=lambda: RngSpec(0, 0))
    rhat_threshold: float = 1.1

    def __post_init__(self):
        if self.n_chains < 4:
            raise InvalidParameterError("need n_chains >= 4 for split diagnostics")
        if self.burn_in < 1 or self.n_samples < 2:
            raise InvalidParameterError("burn_in and n_samples must be positive")
        if not (0.0 < self.target_accept < 1.0):
            raise InvalidParameterError("target_accept must lie in (0, 1)")
        if self.step_init <= 0:
            raise InvalidParameterError("step_init must be positive")


def _radial_peak(gamma_top: float, n: int, sigma_p: float, lam_p: float) -> float:
    """Maximiser of the radial log profile over |v|^2 (0 when uninformative)."""
    if lam_p <= 0:
        return 0.0
    a = 0.5 * math.sqrt(lam_p / n) * gamma_top - 0.5 / sigma_p**2
    if a <= 0:
        return 0.0
    return 2.0 * n * a / lam_p


def _eig_value_grad(v: np.ndarray, gam: np.ndarray, sigma_p: float,
                    lam_p: float, n: int) -> tuple:
    norm2 = float(v @ v)
    gv = gam * v
    value = (
        -norm2 / (2.0 * sigma_p**2)
        - lam_p * norm2**2 / (4.0 * n)
        + 0.5 * math.sqrt(lam_p / n) * float(v @ gv)
    )
    grad = -v / sigma_p**2 - (lam_p / n) * norm2 * v + math.sqrt(lam_p / n) * gv
    return value, grad


def _run_chain(gam: np.ndarray, sigma_p: float, lam_p: float, cfg: ChainConfig,
               chain_idx: int, trial: int, mirror: bool = False) -> dict:
    """One MALA chain in the eigenbasis; returns segment statistics of v_i^2."""
    n = gam.size
    gen = cfg.rng.generator(trial, chain_idx + 1)

    # deliberately spread initial radii: tiny, prior-typical, informative
    # fixed point, and fully random
    direction = gen.standard_normal(n)
    direction /= math.sqrt(float(direction @ direction))
    peak = _radial_peak(float(gam.max()), n, sigma_p, lam_p)
    radii2 = [1e-2 * n * sigma_p**2, n * sigma_p**2, max(peak, n * sigma_p**2)]
    if chain_idx < 3:
        v = direction * math.sqrt(radii2[chain_idx])
    else:
        v = sigma_p * gen.standard_normal(n)
    if mirror:
        v = -v

    log_step = math.log(cfg.step_init)
    value, grad = _eig_value_grad(v, gam, sigma_p, lam_p, n)

    accepted = 0.0
    seg_len = cfg.n_samples // 2
    sums = np.zeros((2, n))
    sumsq = np.zeros((2, n))
    cross = np.zeros(2)  # running sum of v_0 * v_1 (off-diagonal check)

    total = cfg.burn_in + 2 * seg_len
    for t in range(total):
        step = math.exp(log_step)
        noise = gen.standard_normal(n)
        prop = v + 0.5 * step**2 * grad + step * noise
        pvalue, pgrad = _eig_value_grad(prop, gam, sigma_p, lam_p, n)
        fwd = prop - v - 0.5 * step**2 * grad
        bwd = v - prop - 0.5 * step**2 * pgrad
        log_alpha = pvalue - value + (float(fwd @ fwd) - float(bwd @ bwd)) / (2.0 * step**2)
        if math.log(max(gen.uniform(), 1e-300)) < log_alpha:
            v, value, grad = prop, pvalue, pgrad
            acc = 1.0
        else:
            acc = 0.0
        if t < cfg.burn_in:
            # Robbins-Monro drift of the log step toward the target rate
            log_step += (math.exp(min(log_alpha, 0.0)) - cfg.target_accept) \
                / math.sqrt(t + 1.0)
        else:
            k = t - cfg.burn_in
            seg = 0 if k < seg_len else 1
            v2 = v * v
            sums[seg] += v2
            sumsq[seg] += v2 * v2
            cross[seg] += v[0] * v[1]
            accepted += acc

    return {
        "sums": sums, "sumsq": sumsq, "cross": cross, "seg_len": seg_len,
        "accept_rate": accepted / (2 * seg_len),
    }


def _split_rhat(seg_means: np.ndarray, seg_vars: np.ndarray, seg_len: int) -> np.ndarray:
    """Split-chain potential scale reduction per coordinate."""
    w = seg_vars.mean(axis=0)
    b = seg_len * seg_means.var(axis=0, ddof=1)
    var_plus = (seg_len - 1) / seg_len * w + b / seg_len
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / w)
    return np.where(w > 0, rhat, 1.0)


def _posterior_eig_moments(instance: SpikedInstance, sigma_p: float, lam_p: float,
                           cfg: ChainConfig, trial: int = 0,
                           mirror: bool = False) -> dict:
    """Per-eigendirection posterior second moments m_i = <v_i^2> with errors."""
    gam = instance.eigvals
    n = instance.n
    results = [_run_chain(gam, sigma_p, lam_p, cfg, c, trial, mirror)
               for c in range(cfg.n_chains)]

    seg_len = results[0]["seg_len"]
    seg_means = np.stack([r["sums"][s] / seg_len for r in results for s in (0, 1)])
    seg_vars = np.stack([
        r["sumsq"][s] / seg_len - (r["sums"][s] / seg_len) ** 2
        for r in results for s in (0, 1)
    ])
    rhat = _split_rhat(seg_means, seg_vars, seg_len)

    # flag only the extreme eigendirections; bulk directions are exchangeable
    watch = sorted(set(range(min(5, n))) | set(range(max(n - 5, 0), n)))
    worst = float(rhat[watch].max())
    if worst > cfg.rhat_threshold:
        raise ChainConvergenceError(
            f"split diagnostic {worst:.3f} exceeds {cfg.rhat_threshold} "
            f"on the extreme eigendirections"
        )

    chain_means = np.stack([r["sums"].sum(axis=0) / (2 * seg_len) for r in results])
    m_hat = chain_means.mean(axis=0)
    m_se = chain_means.std(axis=0, ddof=1) / math.sqrt(cfg.n_chains)
    cross = np.array([r["cross"].sum() / (2 * seg_len) for r in results])
    return {
        "m_hat": m_hat,
        "m_se": m_se,
        "rhat": rhat,
        "accept_rates": [r["accept_rate"] for r in results],
        "cross_mean": float(cross.mean()),
        "cross_se": float(cross.std(ddof=1) / math.sqrt(cfg.n_chains)),
    }


@dataclass(frozen=True)
class PosteriorOuter:
    """Posterior outer-product estimate with entrywise standard errors."""

    mean: np.ndarray
    std_error: np.ndarray
    diagnostics: dict


def posterior_mean_outer(spec: PosteriorSpec, cfg: ChainConfig,
                         mirror: bool = False) -> PosteriorOuter:
    """MCMC estimate of <x x^T> under the mismatched posterior.

    Returns Q diag(m) Q^T where Q are the eigenvectors of the observation and
    m_i averages the squared i-th eigen-coordinate; off-diagonal eigenbasis
    moments are exactly zero by the evenness of the density in each
    coordinate.  mirror=True negates every initial point (a sign-symmetry
    diagnostic; the statistics are invariant in distribution).
    """
    mom = _posterior_eig_moments(spec.instance, spec.sigma_p, spec.lam_p, cfg,
                                 mirror=mirror)
    q = spec.instance.eigvecs
    mean = (q * mom["m_hat"]) @ q.T
    mean = 0.5 * (mean + mean.T)
    q2 = q * q
    std_error = np.sqrt((q2 * (mom["m_se"] ** 2)) @ q2.T)
    return PosteriorOuter(mean=mean, std_error=std_error, diagnostics=mom)


def small_n_quadrature(spec: PosteriorSpec, nodes_per_axis: int = 200) -> np.ndarray:
    """Dense tensor-product quadrature oracle for <x x^T>, n <= 4 only.

    Gauss-Legendre nodes on [-L, L] per eigen-axis, with L sized to eight
    posterior widths beyond the radial ridge (the density can concentrate on
    a thin shell when the top eigenvalue is large, so the box follows the
    ridge radius and its curvature, capped by the quartic confinement).
    Exact symmetrisation is enforced on the result.
    """
    n = spec.instance.n
    if n > 4:
        raise DimensionTooLargeError(f"dense quadrature capped at n=4, got {n}")
    if nodes_per_axis < 64:
        raise InvalidParameterError("need at least 64 nodes per axis")

    gam = spec.instance.eigvals
    sigma_p, lam_p = spec.sigma_p, spec.lam_p
    peak = _radial_peak(float(gam.max()), n, sigma_p, lam_p)
    ring = math.sqrt(peak) if peak > 0 else 0.0
    if lam_p > 0:
        a = 0.5 * math.sqrt(lam_p / n) * float(gam.max()) - 0.5 / sigma_p**2
        quartic_cut = (128.0 * n / lam_p) ** 0.25
        width = 8.0 / math.sqrt(2.0 * abs(a)) if a != 0.0 else math.inf
        half_width = ring + min(width, quartic_cut)
    else:
        half_width = 8.0 * sigma_p

    x, w = np.polynomial.legendre.leggauss(nodes_per_axis)
    x = x * half_width
    w = w * half_width

    rest = np.meshgrid(*([x] * (n - 1)), indexing="ij")
    v_rest = np.stack([a.ravel() for a in rest], axis=1) if n > 1 else np.zeros((1, 0))
    w_rest = np.ones(v_rest.shape[0])
    idx = np.meshgrid(*([np.arange(nodes_per_axis)] * (n - 1)), indexing="ij")
    for k in range(n - 1):
        w_rest *= w[idx[k].ravel()]
    rest_norm2 = np.einsum("ij,ij->i", v_rest, v_rest)
    rest_gquad = (v_rest * v_rest) @ gam[1:]

    # peel off the first axis to keep the mesh memory bounded at n = 4
    z_total = 0.0
    second = np.zeros((n, n))
    peak_log = -math.inf
    blocks = []
    for i in range(nodes_per_axis):
        v0 = x[i]
        norm2 = v0 * v0 + rest_norm2
        logw = (
            -norm2 / (2.0 * sigma_p**2)
            - lam_p * norm2**2 / (4.0 * n)
            + 0.5 * math.sqrt(lam_p / n) * (gam[0] * v0 * v0 + rest_gquad)
        )
        blocks.append(logw.max())
        peak_log = max(peak_log, blocks[-1])
    for i in range(nodes_per_axis):
        v0 = x[i]
        norm2 = v0 * v0 + rest_norm2
        logw = (
            -norm2 / (2.0 * sigma_p**2)
            - lam_p * norm2**2 / (4.0 * n)
            + 0.5 * math.sqrt(lam_p / n) * (gam[0] * v0 * v0 + rest_gquad)
        )
        dens = (w[i] * w_rest) * np.exp(logw - peak_log)
        z_total += dens.sum()
        full = np.concatenate([np.full((dens.size, 1), v0), v_rest], axis=1)
        second += (full.T * dens) @ full
    second /= z_total

    q = spec.instance.eigvecs
    out = q @ second @ q.T
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MseReport:
    """Finite-n matrix-error measurement with its asymptotic target."""

    n: int
    trials: int
    params: ProblemParams
    mse: Estimate
    asymptotic: float
    z_score: float
    seed: int
    diagnostics: tuple = ()

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "trials": self.trials,
            "params": {
                "sigma": self.params.sigma,
                "sigma_p": self.params.sigma_p,
                "lambda": self.params.lam,
                "lambda_p": self.params.lam_p,
            },
            "mse": {
                "mean": self.mse.mean,
                "stderr": self.mse.std_error,
                "samples": self.mse.n_samples,
            },
            "asymptotic": self.asymptotic,
            "z_score": self.z_score,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def _mse_trial(p: ProblemParams, n: int, cfg: ChainConfig, trial: int) -> tuple:
    inst = sample_instance(n, p.sigma, p.lam, _trial_stream(cfg.rng, trial))
    mom = _posterior_eig_moments(inst, p.sigma_p, p.lam_p, cfg, trial=trial)
    s_eig = inst.eigvecs.T @ inst.s
    s2 = s_eig * s_eig
    value = (float(s2.sum()) ** 2 - 2.0 * float(s2 @ mom["m_hat"])
             + float(mom["m_hat"] @ mom["m_hat"])) / n**2
    diag = {
        "trial": trial,
        "accept_rates": mom["accept_rates"],
        "rhat_max": float(mom["rhat"].max()),
    }
    return value, diag


def mse_experiment(p: ProblemParams, n: int, trials: int, cfg: ChainConfig,
                   workers: int = 1) -> MseReport:
    """Measure the finite-n matrix MSE over independent instances.

    Each trial samples a fresh instance on its own stream, estimates the
    posterior outer product by MCMC, and accumulates the squared Frobenius
    error against s s^T (diagonal entries included, as defined; they carry an
    O(1/n) bias that is reported as-is).  The z-score compares the trial mean
    with the closed-form limit.
    """
    if trials < 8:
        raise InvalidParameterError(f"need at least 8 trials, got {trials}")
    target = asymptotic_mse(p)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda t: _mse_trial(p, n, cfg, t), range(trials)))
    else:
        out = [_mse_trial(p, n, cfg, t) for t in range(trials)]
    values = [v for v, _ in out]
    diags = tuple(d for _, d in out)
    est = Estimate.from_samples(values)
    z = (est.mean - target) / est.std_error if est.std_error > 0 else math.inf
    return MseReport(n=n, trials=trials, params=p, mse=est, asymptotic=target,
                     z_score=z, seed=cfg.rng.seed, diagnostics=diags)


def _free_energy_trial(p: ProblemParams, n: int, rng: RngSpec, trial: int,
                       grid_points: int, mc_samples: int) -> float:
    inst = sample_instance(n, p.sigma, p.lam, _trial_stream(rng, trial))
    gam = inst.eigvals / math.sqrt(n)
    sigma_p, lam_p = p.sigma_p, p.lam_p

    # radial grid in r = |x|^2 / n; the integrand peaks at O(sigma_p^2)
    grid = np.geomspace(1e-3 / n, 20.0 * sigma_p**2, grid_points)
    log_f = np.empty(grid_points)
    for j, r in enumerate(grid):
        theta = 0.5 * math.sqrt(lam_p) * r
        if theta == 0.0:
            log_i = 0.0
        else:
            log_i = hciz_rank1_mc(gam, theta, mc_samples,
                                  _trial_stream(rng, trial, offset=1 + j)).mean
        log_f[j] = ((n / 2.0 - 1.0) * math.log(r)
                    - n * r / (2.0 * sigma_p**2)
                    - n * lam_p * r**2 / 4.0
                    + n * log_i)

    # trapezoid on the nonuniform grid, carried in log space
    dr = np.diff(grid)
    shift = log_f.max()
    f = np.exp(log_f - shift)
    log_integral = shift + math.log(float(np.sum(0.5 * (f[1:] + f[:-1]) * dr)))
    const = (-0.5 * n * math.log(2.0) - gammaln(n / 2.0)
             - n * math.log(sigma_p) + 0.5 * n * math.log(n))
    return -(const + log_integral) / n


def free_energy_experiment(p: ProblemParams, n: int, trials: int, rng: RngSpec,
                           grid_points: int = 200, mc_samples: int = 2048,
                           workers: int = 1) -> Estimate:
    """Estimate the finite-n free energy by the radial reduction.

    The partition function of the mismatched posterior depends on x only
    through |x|; after rotation averaging it becomes a one-dimensional radial
    integral whose integrand carries the rank-one sphere-average factor,
    estimated per grid point by hciz_rank1_mc.  Returns the across-trial mean
    of -(1/n) log Z with its standard error.
    """
    if trials < 8:
        raise InvalidParameterError(f"need at least 8 trials, got {trials}")
    if grid_points < 16:
        raise InvalidParameterError("need at least 16 radial grid points")
    if grid_points >= _TRIAL_BLOCK - 1:
        raise InvalidParameterError("radial grid too large for the stream layout")
    args = [(p, n, rng, t, grid_points, mc_samples) for t in range(trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(lambda a: _free_energy_trial(*a), args))
    else:
        values = [_free_energy_trial(*a) for a in args]
    return Estimate.from_samples(values)
