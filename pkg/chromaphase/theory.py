"""
Monte Carlo checks of the forward diffusion's moment properties.

The forward SDE is

    dY_t = -1/2 beta(t) Y_t dt + sqrt(beta(t)) dW_t,

integrated with Euler-Maruyama at a uniform step 1/steps. Path `i`
draws its start value and all its increments from
`util.rng_stream(seed, i)`, so results do not depend on the number of
worker threads. Checks compare empirical moments within 3 standard
errors; they never compare individual paths.
"""

import numpy as np
import scipy.integrate

from chromaphase import util
from chromaphase.util import ChromaphaseError, log

DEFAULT_TIMES = (0.25, 0.5, 1.0)

# Paths per worker task.
CHUNK = 256


class SdeConfig:
    """
    Class representing a Monte Carlo run: the rate `beta` (a number or
    a function of t), the number of time steps and paths, the state
    dimension, the seed and the times at which moments are recorded.
    Immutable.
    """

    def __init__(self, beta, steps=200, paths=10000, dim=16, seed=0, times=DEFAULT_TIMES):
        if steps < 10:
            raise ChromaphaseError("SDE simulation needs at least 10 steps, got {}", steps)
        if paths < 100:
            raise ChromaphaseError("SDE simulation needs at least 100 paths, got {}", paths)
        if dim < 1:
            raise ChromaphaseError("state dimension must be positive, got {}", dim)
        times = tuple(float(t) for t in times)
        if any(not 0 <= t <= 1 for t in times):
            raise ChromaphaseError("record times must lie in [0, 1]: {}", times)
        if callable(beta):
            self._beta_fn = beta
            self._beta_name = getattr(beta, "__name__", "custom")
        else:
            rate = float(beta)
            self._beta_fn = lambda t: np.full_like(np.asarray(t, dtype=np.float64), rate)
            self._beta_name = "{:g}".format(rate)
        self._steps = int(steps)
        self._paths = int(paths)
        self._dim = int(dim)
        self._seed = int(seed)
        self._times = times

    def beta(self, t):
        return np.asarray(self._beta_fn(np.asarray(t, dtype=np.float64)), dtype=np.float64)

    @property
    def beta_name(self):
        return self._beta_name

    @property
    def steps(self):
        return self._steps

    @property
    def paths(self):
        return self._paths

    @property
    def dim(self):
        return self._dim

    @property
    def seed(self):
        return self._seed

    @property
    def times(self):
        return self._times

    def with_seed(self, seed):
        return SdeConfig(self._beta_fn, self._steps, self._paths, self._dim, seed, self._times)

    def gamma(self, t):
        """
        Return exp(-int_0^t beta(s) ds).
        """
        integral, _ = scipy.integrate.quad(lambda s: float(self.beta(s)), 0.0, t)
        return float(np.exp(-integral))

    def _to_json(self):
        return {
            "beta": self._beta_name,
            "steps": self._steps,
            "paths": self._paths,
            "dim": self._dim,
            "seed": self._seed,
            "times": list(self._times),
        }


class PathMoments:
    """
    Class holding the simulated states at the record times, shape
    (times, paths, dim), with their empirical moments.
    """

    def __init__(self, times, samples):
        self.times = tuple(times)
        self.samples = samples

    @property
    def paths(self):
        return self.samples.shape[1]

    def mean(self, idx):
        return self.samples[idx].mean(axis=0)

    def covariance(self, idx):
        return np.cov(self.samples[idx], rowvar=False).reshape(self.samples.shape[2], -1)

    def mean_standard_error(self, idx):
        """
        Return the per-coordinate standard error of `mean(idx)`.
        """
        return self.samples[idx].std(axis=0, ddof=1) / np.sqrt(self.paths)

    def trace_and_error(self, idx):
        """
        Return the covariance trace at `idx` and its standard error.
        """
        centered = self.samples[idx] - self.mean(idx)
        sq = np.sum(centered ** 2, axis=1)
        return float(sq.sum() / (self.paths - 1)), float(sq.std(ddof=1) / np.sqrt(self.paths))


def _record_indices(cfg):
    return [int(round(t * cfg.steps)) for t in cfg.times]


def simulate_forward_paths(y0_sampler, cfg, threads=None):
    """
    Simulate `cfg.paths` Euler-Maruyama paths started from
    `y0_sampler(rng, dim)` and return their states at `cfg.times` as
    `PathMoments`.

    The update Y_{n+1} = a_n Y_n + s_n z_n (a_n = 1 - beta_n dt / 2,
    s_n = sqrt(beta_n dt)) is linear, so each path is evaluated in
    closed form from its increments rather than step by step.
    """
    dt = 1.0 / cfg.steps
    grid = np.arange(cfg.steps) * dt
    betas = cfg.beta(grid)
    if np.any(betas < 0):
        raise ChromaphaseError("beta must be non-negative")
    if np.max(betas) * dt > 0.5:
        log.warn("Euler-Maruyama step too coarse: beta dt = {:.3g} > 0.5", np.max(betas) * dt)
    a = 1 - 0.5 * betas * dt
    s = np.sqrt(betas * dt)
    # decay[n] = prod_{k < n} a_k
    decay = np.concatenate([[1.0], np.cumprod(a)])
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.where(decay[1:] != 0, s / decay[1:], 0.0)
    record = _record_indices(cfg)

    def run_chunk(start):
        stop = min(start + CHUNK, cfg.paths)
        out = np.empty((len(record), stop - start, cfg.dim))
        for row, path in enumerate(range(start, stop)):
            rng = util.rng_stream(cfg.seed, path)
            y0 = np.asarray(y0_sampler(rng, cfg.dim), dtype=np.float64)
            increments = rng.standard_normal((cfg.steps, cfg.dim)) * gain[:, None]
            accumulated = np.concatenate([np.zeros((1, cfg.dim)), np.cumsum(increments, axis=0)])
            for col, n in enumerate(record):
                out[col, row] = decay[n] * (y0 + accumulated[n])
        return out

    chunks = util.parallel_map(run_chunk, range(0, cfg.paths, CHUNK), threads)
    return PathMoments(cfg.times, np.concatenate(chunks, axis=1))


def constant_start(mu0):
    mu0 = np.asarray(mu0, dtype=np.float64)
    return lambda rng, dim: mu0


def gaussian_start(mu0, scale=0.5):
    mu0 = np.asarray(mu0, dtype=np.float64)
    return lambda rng, dim: mu0 + scale * rng.standard_normal(dim)


def _default_mu0(cfg):
    return np.ones(cfg.dim)


def check_lemma_mean(cfg, mu0=None, tolerance=0.02, threads=None):
    """
    Check that the mean of Y_t started at the fixed point mu0 is
    sqrt(gamma(t)) mu0. The relative error
    ||mean(Y_t) - sqrt(gamma(t)) mu0|| / ||mu0|| must stay below
    `tolerance`; for mu0 = 0 the absolute error must stay below three
    standard errors.
    """
    mu0 = _default_mu0(cfg) if mu0 is None else np.asarray(mu0, dtype=np.float64)
    moments = simulate_forward_paths(constant_start(mu0), cfg, threads)
    norm = float(np.linalg.norm(mu0))
    entries = []
    for idx, t in enumerate(cfg.times):
        expected = np.sqrt(cfg.gamma(t)) * mu0
        error = float(np.linalg.norm(moments.mean(idx) - expected))
        se = float(np.sqrt(np.sum(moments.mean_standard_error(idx) ** 2)))
        if norm > 0:
            relative = error / norm
            passed = relative < tolerance
        else:
            relative = None
            passed = error <= 3 * se
        entries.append(
            {
                "t": t,
                "gamma": cfg.gamma(t),
                "absoluteError": error,
                "relativeError": relative,
                "standardError": se,
                "passed": bool(passed),
            }
        )
    return {
        "check": "lemmaMean",
        "config": cfg._to_json(),
        "tolerance": tolerance,
        "entries": entries,
        "passed": all(entry["passed"] for entry in entries),
    }


def check_centered_process(cfg, mu0=None, scale=0.5, threads=None):
    """
    Compare two ways of producing the centered process: (a) simulate
    Y_t from Y_0 ~ N(mu0, scale^2 I) and subtract sqrt(gamma(t)) mu0;
    (b) run the same SDE from Y_0 - mu0 directly, on independent random
    streams. Means (norm of the difference) and covariance traces must
    agree within three standard errors at every record time.
    """
    mu0 = _default_mu0(cfg) if mu0 is None else np.asarray(mu0, dtype=np.float64)
    shifted = simulate_forward_paths(gaussian_start(mu0, scale), cfg, threads)
    direct = simulate_forward_paths(
        gaussian_start(np.zeros_like(mu0), scale), cfg.with_seed(cfg.seed + 1), threads
    )
    entries = []
    for idx, t in enumerate(cfg.times):
        centered_mean = shifted.mean(idx) - np.sqrt(cfg.gamma(t)) * mu0
        mean_gap = float(np.linalg.norm(centered_mean - direct.mean(idx)))
        mean_se = float(
            np.sqrt(
                np.sum(shifted.mean_standard_error(idx) ** 2 + direct.mean_standard_error(idx) ** 2)
            )
        )
        trace_a, se_a = shifted.trace_and_error(idx)
        trace_b, se_b = direct.trace_and_error(idx)
        trace_gap = abs(trace_a - trace_b)
        trace_se = float(np.hypot(se_a, se_b))
        entries.append(
            {
                "t": t,
                "meanGap": mean_gap,
                "meanStandardError": mean_se,
                "traceShifted": trace_a,
                "traceDirect": trace_b,
                "traceGap": trace_gap,
                "traceStandardError": trace_se,
                "passed": bool(mean_gap <= 3 * mean_se and trace_gap <= 3 * trace_se),
            }
        )
    return {
        "check": "centeredProcess",
        "config": cfg._to_json(),
        "entries": entries,
        "passed": all(entry["passed"] for entry in entries),
    }


def check_moment_identity(dataset, tolerance=1e-10):
    """
    For samples `dataset` (N, ...) with empirical mean mu0, check

        mean ||y - mu0||^2 = mean ||y||^2 - ||mu0||^2

    to relative `tolerance`, and report whether centering lowers the
    second moment (it always does, by the identity).
    """
    y = np.asarray(dataset, dtype=np.float64)
    if y.ndim < 1 or y.shape[0] == 0:
        raise ChromaphaseError("moment identity needs at least one sample")
    y = y.reshape(y.shape[0], -1)
    mu0 = y.mean(axis=0)
    centered = float(np.mean(np.sum((y - mu0) ** 2, axis=1)))
    raw = float(np.mean(np.sum(y ** 2, axis=1)))
    mean_norm = float(np.sum(mu0 ** 2))
    rhs = raw - mean_norm
    scale = max(raw, np.finfo(np.float64).tiny)
    relative = abs(centered - rhs) / scale
    return {
        "check": "momentIdentity",
        "samples": int(y.shape[0]),
        "centeredMoment": centered,
        "rawMoment": raw,
        "meanNormSquared": mean_norm,
        "identityRhs": rhs,
        "relativeError": relative,
        "centeringHelps": bool(centered <= raw),
        "passed": bool(relative <= tolerance),
    }


def verify_theory(betas=(0.5, 2.0, 10.0), paths=10000, steps=200, dim=16, seed=0, datasets=10, threads=None):
    """
    Run every check for every constant rate in `betas`, plus the moment
    identity on `datasets` random datasets, and return one report.
    """
    checks = []
    for idx, b in enumerate(betas):
        cfg = SdeConfig(b, steps=steps, paths=paths, dim=dim, seed=seed + 2 * idx)
        checks.append(check_lemma_mean(cfg, threads=threads))
        checks.append(check_centered_process(cfg, threads=threads))
        log.info("verified beta = {:g}", b)
    for idx in range(datasets):
        rng = util.rng_stream(seed, 1 << 20, idx)
        offset = rng.uniform(-10, 10, dim)
        checks.append(check_moment_identity(offset + rng.standard_normal((64, dim))))
    return {"checks": checks, "passed": all(check["passed"] for check in checks)}
