"""Brownian and Ornstein-Uhlenbeck bridge mathematics.

Both bridges are pinned at (0, 0) and (T, beta) and treated as r independent
coordinates (isotropic product form). The Brownian bridge uses the standard
marginal variance t(T-t)/T. The OU bridge marginal mean is
sinh(q t)/sinh(q T) * beta, the form that satisfies the bridge drift ODE and
the Monte-Carlo oracle; see tests for the validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BROWNIAN = "brownian"
OU = "ou"


class HorizonBoundaryError(ValueError):
    """drift() evaluated too close to the pinned endpoint t = T."""


class TransitionDomainError(ValueError):
    """transition_logpdf() requires 0 < t < T strictly."""


@dataclass(frozen=True)
class BridgeSpec:
    """A pinned diffusion bridge: head endpoint is the zero vector, tail is
    beta at time horizon. q and sigma only matter for the OU kind (Brownian
    diffusion is the identity)."""

    kind: str
    beta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    horizon: float = 1.0
    q: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in (BROWNIAN, OU):
            raise ValueError(f"unknown bridge kind {self.kind!r}")
        object.__setattr__(self, "beta",
                           np.atleast_1d(np.asarray(self.beta, dtype=np.float64)))
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.kind == OU and (self.q <= 0 or self.sigma <= 0):
            raise ValueError("OU bridge needs q > 0 and sigma > 0")

    @property
    def dim(self) -> int:
        return self.beta.shape[0]

    def diffusion_scale(self) -> float:
        return self.sigma if self.kind == OU else 1.0


@dataclass(frozen=True)
class PathSample:
    """One realization on a uniform grid; values[0] is the zero vector and
    values[-1] is pinned exactly to beta."""

    times: np.ndarray
    values: np.ndarray


def drift(spec: BridgeSpec, t: float, x) -> np.ndarray:
    """Bridge drift field at (t, x), valid strictly before the horizon."""
    x = np.asarray(x, dtype=np.float64)
    T = spec.horizon
    if T - t < 1e-9:
        raise HorizonBoundaryError(f"drift at t={t} within 1e-9 of horizon {T}")
    if spec.kind == BROWNIAN:
        return (spec.beta - x) / (T - t)
    q = spec.q
    s = q * (T - t)
    return q * (-(1.0 / math.tanh(s)) * x + spec.beta / math.sinh(s))


def mean_coeff(spec: BridgeSpec, t: float) -> float:
    """Marginal mean of the bridge at t is mean_coeff(t) * beta."""
    if spec.kind == BROWNIAN:
        return t / spec.horizon
    return math.sinh(spec.q * t) / math.sinh(spec.q * spec.horizon)


def marginal_variance(spec: BridgeSpec, t: float) -> float:
    """Per-coordinate marginal variance of the bridge at t."""
    T = spec.horizon
    if spec.kind == BROWNIAN:
        return t * (T - t) / T
    q = spec.q
    return (spec.sigma ** 2 / q) * math.sinh(q * (T - t)) * math.sinh(q * t) / math.sinh(q * T)


def transition_logpdf(spec: BridgeSpec, t: float, x) -> float:
    """Log-density of the bridge marginal at time t from the (0, 0) head,
    summed over the r independent coordinates."""
    if not 0.0 < t < spec.horizon:
        raise TransitionDomainError(f"t={t} outside (0, {spec.horizon})")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    m = mean_coeff(spec, t) * spec.beta
    v = marginal_variance(spec, t)
    r = spec.dim
    return float(-0.5 * r * math.log(2.0 * math.pi * v)
                 - ((x - m) ** 2).sum() / (2.0 * v))


def sample_path(spec: BridgeSpec, n_steps: int, rng: np.random.Generator) -> PathSample:
    """Euler-Maruyama on a uniform grid; the final value is set exactly to
    beta (the drift is singular at T, so the last step is pinning)."""
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    T = spec.horizon
    dt = T / n_steps
    times = np.linspace(0.0, T, n_steps + 1)
    values = np.zeros((n_steps + 1, spec.dim))
    sig = spec.diffusion_scale()
    x = np.zeros(spec.dim)
    for k in range(n_steps - 1):
        noise = rng.standard_normal(spec.dim)
        x = x + drift(spec, times[k], x) * dt + sig * math.sqrt(dt) * noise
        values[k + 1] = x
    values[n_steps] = spec.beta
    return PathSample(times=times, values=values)


def sample_paths_marginal(spec: BridgeSpec, n_steps: int, n_paths: int,
                          step_index: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized Euler-Maruyama over many paths, returning only the values
    at the grid index step_index (memory stays O(n_paths * r))."""
    T = spec.horizon
    dt = T / n_steps
    sig = spec.diffusion_scale()
    x = np.zeros((n_paths, spec.dim))
    if step_index == 0:
        return x
    for k in range(min(step_index, n_steps - 1)):
        t = k * dt
        if spec.kind == BROWNIAN:
            d = (spec.beta - x) / (T - t)
        else:
            s = spec.q * (T - t)
            d = spec.q * (-(1.0 / math.tanh(s)) * x + spec.beta / math.sinh(s))
        x = x + d * dt + sig * math.sqrt(dt) * rng.standard_normal(x.shape)
    if step_index >= n_steps:
        return np.broadcast_to(spec.beta, (n_paths, spec.dim)).copy()
    return x


def discrete_log_goodness(spec: BridgeSpec, path) -> float:
    """Sum of transition log-densities over (t_i, u_i) points (the additive
    constant from the bridge definition is omitted throughout)."""
    return float(sum(transition_logpdf(spec, t, u) for t, u in path))


def kl_path_estimate(spec: BridgeSpec, drift_fn, n_steps: int, n_paths: int,
                     rng: np.random.Generator) -> float:
    """Girsanov KL between the path measure of dZ = drift_fn dt + sigma dB
    and the bridge, estimated by simulating Z under drift_fn and summing
    0.5 * ||sigma^-1 (drift_fn - bridge drift)||^2 * dt up to
    t_max = T (1 - 1/n_steps), the hard truncation before the singularity."""
    if n_steps < 2 or n_paths < 1:
        raise ValueError("need n_steps >= 2 and n_paths >= 1")
    T = spec.horizon
    dt = T / n_steps
    sig = spec.diffusion_scale()
    total = 0.0
    for _ in range(n_paths):
        z = np.zeros(spec.dim)
        acc = 0.0
        for k in range(n_steps - 1):
            t = k * dt
            g = np.asarray(drift_fn(t, z), dtype=np.float64)
            u = (g - drift(spec, t, z)) / sig
            acc += 0.5 * float((u * u).sum()) * dt
            z = z + g * dt + sig * math.sqrt(dt) * rng.standard_normal(spec.dim)
        total += acc
    return total / n_paths
