"""Direct particle filter for static or slowly varying model parameters.

The parameter is given zero dynamics plus a small artificial jitter. Each
particle is pushed through one deterministic step of the state equation,
started from the current observation, and scored against the next
observation. The state equation acts as the observation function of the
parameter, so the filter lives in parameter space only.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .sde import ControlledModel, RngStream, TemporalGrid


class DegenerateLikelihoodError(RuntimeError):
    """Raised when every particle has zero (or non-finite) likelihood."""


class DegenerateLikelihoodWarning(RuntimeWarning):
    pass


@dataclass
class ParticleCloud:
    """Weighted parameter samples.

    Attributes
    ----------
    particles : ndarray, shape (M, q)
    weights : ndarray, shape (M,)
        Nonnegative, summing to one.
    degenerate : bool
        Set when the last update fell back to uniform weights.
    """

    particles: np.ndarray
    weights: np.ndarray | None = None
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError(f"particles must have shape (M, q) with M >= 1, got {p.shape}")
        self.particles = np.ascontiguousarray(p)
        M = p.shape[0]
        if self.weights is None:
            w = np.full(M, 1.0 / M)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (M,):
                raise ValueError(f"weights must have shape ({M},), got {w.shape}")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        self.weights = w

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def std(self) -> np.ndarray:
        mu = posterior_mean(self)
        return np.sqrt(self.weights @ (self.particles - mu) ** 2)

    @classmethod
    def uniform_prior(cls, lower, upper, size: int, rng: RngStream) -> "ParticleCloud":
        """Draw ``size`` particles uniformly from the box ``[lower, upper]``."""
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if lower.shape != upper.shape or np.any(upper < lower):
            raise ValueError("prior box needs lower <= upper with matching shapes")
        if size < 1:
            raise ValueError("cloud size must be >= 1")
        return cls(rng.generator.uniform(lower, upper, size=(size, lower.size)))


@dataclass(frozen=True)
class JitterSpec:
    """Covariance of the artificial parameter noise and its per-step decay."""

    covariance: np.ndarray
    decay_factor: float = 0.98

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if c.shape[0] != c.shape[1]:
            raise ValueError("jitter covariance must be square")
        if not np.allclose(c, c.T, atol=1e-12):
            raise ValueError("jitter covariance must be symmetric")
        if np.linalg.eigvalsh(c).min() < -1e-12 * max(1.0, np.abs(c).max()):
            raise ValueError("jitter covariance must be positive semidefinite")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        object.__setattr__(self, "covariance", c)

    @classmethod
    def from_prior(cls, lower, upper, scale: float = 0.1, decay_factor: float = 0.98) -> "JitterSpec":
        """Isotropic jitter with std ``scale`` times the prior width (widest side)."""
        width = np.max(np.atleast_1d(upper) - np.atleast_1d(lower))
        q = np.atleast_1d(lower).size
        return cls((scale * width) ** 2 * np.eye(q), decay_factor)

    @classmethod
    def none(cls, q: int) -> "JitterSpec":
        return cls(np.zeros((q, q)), 1.0)

    def effective(self, step_index: int) -> np.ndarray:
        return self.covariance * self.decay_factor**step_index

    def sample(self, step_index: int, size: int, rng: RngStream) -> np.ndarray:
        """Draw ``size`` jitter vectors for the given step."""
        cov = self.effective(step_index)
        q = cov.shape[0]
        if not np.any(cov):
            return np.zeros((size, q))
        return rng.generator.standard_normal((size, q)) @ _psd_sqrt(cov).T


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass
class ObservationSeq:
    """Observations ``M_{t_1}, M_{t_2}, ...`` with noise covariance ``Sigma``."""

    noise_cov: np.ndarray
    values: list = field(default_factory=list)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.noise_cov, dtype=np.float64))
        if s.shape[0] != s.shape[1] or not np.allclose(s, s.T):
            raise ValueError("noise_cov must be a symmetric square matrix")
        if np.linalg.eigvalsh(s).min() < -1e-14:
            raise ValueError("noise_cov must be positive semidefinite")
        self.noise_cov = s
        self.values = [np.asarray(v, dtype=np.float64) for v in self.values]

    def append(self, value) -> None:
        self.values.append(np.asarray(value, dtype=np.float64))

    def __len__(self):
        return len(self.values)

    def __getitem__(self, n: int) -> np.ndarray:
        """Observation at grid index ``n`` (``n >= 1``)."""
        if n < 1 or n > len(self.values):
            raise IndexError(f"no observation at index {n}")
        return self.values[n - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


def predict(cloud: ParticleCloud, jitter: JitterSpec, step_index: int, rng: RngStream) -> ParticleCloud:
    """Zero-dynamics prediction: add jitter to every particle, keep weights."""
    if jitter.covariance.shape[0] != cloud.dim:
        raise ValueError(f"jitter dimension {jitter.covariance.shape[0]} != particle dimension {cloud.dim}")
    noise = jitter.sample(step_index, cloud.size, rng)
    return ParticleCloud(cloud.particles + noise, cloud.weights.copy())


def likelihood_denominator(model: ControlledModel, t_n: float, Sigma, dt: float) -> float:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    sig = np.linalg.norm(model.diffusion(t_n), 2)
    obs = np.linalg.norm(np.atleast_2d(Sigma), 2)
    denom = sig**2 * dt + obs**2
    if not denom > 0:
        raise ValueError("likelihood denominator is zero: both diffusion and observation noise vanish")
    return float(denom)


def log_likelihood_weight(model, t_n, x_est, u_n, zeta, M_next, Sigma, dt) -> float:
    """Logarithm of :func:`likelihood_weight`."""
    denom = likelihood_denominator(model, t_n, Sigma, dt)
    x_est = model.check_state(x_est, "x_est")
    pred = x_est + model.drift(t_n, x_est, model.check_control(u_n), model.check_param(zeta, "zeta")) * dt
    dev = model.check_state(M_next, "M_next") - pred
    return -float(dev @ dev) / denom


def likelihood_weight(model, t_n, x_est, u_n, zeta, M_next, Sigma, dt) -> float:
    """Pseudo-observation likelihood of parameter sample ``zeta``.

    The predicted state is ``x_est + b(t_n, x_est, u_n, zeta) dt``; the
    weight is ``exp(-|M_next - pred|^2 / (|sigma(t_n)|^2 dt + |Sigma|^2))``
    with spectral norms for the matrices.
    """
    return math.exp(log_likelihood_weight(model, t_n, x_est, u_n, zeta, M_next, Sigma, dt))


@numba.njit
def _log_likelihoods(fns, t, x_est, u, particles, m_next, denom, dt):
    drift = fns[0]
    M = particles.shape[0]
    out = np.empty(M)
    for i in range(M):
        b = drift(t, x_est, u, particles[i])
        s = 0.0
        for j in range(x_est.shape[0]):
            r = m_next[j] - x_est[j] - b[j] * dt
            s += r * r
        out[i] = -s / denom
    return out


def log_likelihoods(model, t_n, x_est, u_n, particles, M_next, Sigma, dt) -> np.ndarray:
    """Vectorised :func:`log_likelihood_weight` over a particle array."""
    denom = likelihood_denominator(model, t_n, Sigma, dt)
    return _log_likelihoods(
        model.callbacks,
        float(t_n),
        model.check_state(x_est, "x_est"),
        model.check_control(u_n),
        np.ascontiguousarray(particles, dtype=np.float64),
        model.check_state(M_next, "M_next"),
        denom,
        float(dt),
    )


def bayes_update(cloud: ParticleCloud, raw_weights) -> ParticleCloud:
    """Normalise nonnegative likelihoods into posterior weights."""
    raw = np.asarray(raw_weights, dtype=np.float64)
    if raw.shape != (cloud.size,):
        raise ValueError(f"expected {cloud.size} raw weights, got shape {raw.shape}")
    if np.any(raw < 0):
        raise ValueError("raw weights must be nonnegative")
    total = raw.sum()
    if not (np.isfinite(total) and total > 0):
        raise DegenerateLikelihoodError("all likelihoods vanished")
    w = raw / total
    w /= w.sum()
    return ParticleCloud(cloud.particles, w)


def bayes_update_log(cloud: ParticleCloud, log_weights) -> ParticleCloud:
    """:func:`bayes_update` from log-likelihoods, shifted by the max to avoid underflow."""
    lw = np.asarray(log_weights, dtype=np.float64)
    top = np.max(lw) if lw.size else -np.inf
    if not np.isfinite(top):
        raise DegenerateLikelihoodError("all log-likelihoods are -inf or nan")
    lw = np.where(np.isnan(lw), -np.inf, lw)
    return bayes_update(cloud, np.exp(lw - top))


def systematic_resample(cloud: ParticleCloud, rng: RngStream) -> ParticleCloud:
    """Systematic resampling: one uniform offset, ``M`` evenly spaced pointers."""
    M = cloud.size
    cum = np.cumsum(cloud.weights) * M
    cum[-1] = M
    positions = np.arange(M) + rng.generator.uniform()
    idx = np.searchsorted(cum, positions, side="right")
    np.minimum(idx, M - 1, out=idx)
    return ParticleCloud(cloud.particles[idx], None, cloud.degenerate)


def posterior_mean(cloud: ParticleCloud) -> np.ndarray:
    return cloud.weights @ cloud.particles


def df_step(
    cloud: ParticleCloud,
    model: ControlledModel,
    t_n: float,
    x_est,
    u_n,
    M_next,
    Sigma,
    jitter: JitterSpec,
    grid: TemporalGrid,
    rng: RngStream,
) -> tuple[ParticleCloud, np.ndarray]:
    """One predict, weight, update, resample cycle.

    Returns the resampled cloud and its mean, the estimate at ``t_{n+1}``.
    If every likelihood vanishes the predicted cloud is kept with uniform
    weights and the returned cloud has ``degenerate=True``.
    """
    n = grid.index_of(t_n)
    pred = predict(cloud, jitter, n, rng)
    logw = log_likelihoods(model, t_n, x_est, u_n, pred.particles, M_next, Sigma, grid.dt)
    try:
        post = bayes_update_log(pred, logw)
    except DegenerateLikelihoodError:
        warnings.warn(f"degenerate likelihood at t={t_n}; keeping uniform weights", DegenerateLikelihoodWarning)
        post = ParticleCloud(pred.particles, None, degenerate=True)
    out = systematic_resample(post, rng)
    return out, posterior_mean(out)
