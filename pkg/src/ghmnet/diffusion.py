"""Stochastic-localization sampling driven by time-indexed denoisers.

The observation process is ``z_t = t x + B_t``; dividing by ``t`` gives a
Gaussian channel ``z_t / t = x + t^{-1/2} g``, so the exact denoiser at time
``t`` is the BP posterior mean at noise variance ``1 / t``.  Sampling runs
Euler-Maruyama on ``dz = m_t(z) dt + dB`` from ``z_0 = 0`` and returns
``z_T / T``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import bp, mp
from .errors import ConfigurationError, EnumerationLimitError, InvalidNoiseError, NumericError
from .ghm import GhmParams, _as_rng
from .nets import UNET, NetWeights, unet_forward
from .oracle import leaf_index

EXACT_MARGINAL_LIMIT = 10**5
EXACT, NETWORK = "exact", "unet"


@dataclass(frozen=True)
class DiffusionConfig:
    T: float = 20.0
    N: int = 800
    n_samples: int = 10000
    seed: int | None = 0
    round_output: bool = True
    denoiser: str = EXACT

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError(f"horizon T must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigurationError(f"step count N must be a positive integer, got {self.N}")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ConfigurationError(f"sample count must be a positive integer, got {self.n_samples}")
        if self.denoiser not in (EXACT, NETWORK):
            raise ConfigurationError(f"unknown denoiser source {self.denoiser!r}")

    @property
    def dt(self) -> float:
        return self.T / self.N


def denoiser_at(params: GhmParams, t: float) -> Callable:
    """Exact ``z -> E[x | t x + sqrt(t) g = z]`` at a fixed time ``t > 0``."""
    if not t > 0:
        raise InvalidNoiseError(f"time must be positive, got {t}")
    t = float(t)
    if t == 1.0:
        return lambda z: bp.bp_denoise(params, z, 1.0)[1]
    return lambda z: bp.bp_denoise(params, np.asarray(z, dtype=float) / t, 1.0 / t)[1]


def _drift_fn(model, params):
    """Return ``(t, z) -> m_t(z)`` for a GHM (exact) or a trained U-Net."""
    if isinstance(model, GhmParams):
        return lambda t, z: bp.bp_denoise(model, z / t, 1.0 / t)[1]
    if isinstance(model, NetWeights):
        if model.kind != UNET:
            raise ConfigurationError("diffusion needs a denoising (U-Net) network")
        return lambda t, z: unet_forward(model, z / t, 1.0 / t)
    if callable(model):
        return model
    raise ConfigurationError(f"cannot build a drift from {type(model).__name__}")


def round_states(x, S: int) -> np.ndarray:
    """Nearest state in ``1..S``, ties rounded up."""
    return np.clip(np.floor(np.asarray(x, dtype=float) + 0.5), 1, S).astype(np.int64)


@dataclass
class SdeResult:
    samples: np.ndarray  # rounded states, or z_T / T when rounding is off
    z_final: np.ndarray
    trajectory: np.ndarray | None = None


def sample_sde(
    model,
    config: DiffusionConfig,
    params: GhmParams | None = None,
    record_trajectory: bool = False,
) -> SdeResult:
    """Euler-Maruyama simulation of ``dz = m_t(z) dt + dB`` on a uniform grid.

    ``model`` is a `GhmParams` (exact BP drift), a U-Net, or a callable
    ``(t, z) -> drift``.  For the first two the step at ``t = 0`` uses the
    prior leaf mean; a callable is also evaluated at ``t = 0``.  ``params``
    is required unless ``model`` is itself a `GhmParams`.
    """
    if params is None and isinstance(model, GhmParams):
        params = model
    if params is None:
        raise ConfigurationError("the t = 0 drift needs the model parameters (prior mean)")
    drift = _drift_fn(model, params)
    rng = _as_rng(config.seed)
    n, d, dt = int(config.n_samples), params.topology.d, config.dt
    sq = np.sqrt(dt)
    z = np.zeros((n, d))
    traj = np.empty((config.N + 1, n, d)) if record_trajectory else None
    if traj is not None:
        traj[0] = z
    prior_mean = params.leaf_prior_mean() if isinstance(model, (GhmParams, NetWeights)) else None
    for k in range(config.N):
        t = k * dt
        if k == 0 and prior_mean is not None:
            m = np.broadcast_to(prior_mean, z.shape)
        else:
            m = np.asarray(drift(t, z), dtype=float)
        z = z + m * dt + sq * rng.standard_normal((n, d))
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state after step {k}", step=k)
        if traj is not None:
            traj[k + 1] = z
    x_hat = z / config.T
    out = round_states(x_hat, params.S) if config.round_output else x_hat
    return SdeResult(out, z, traj)


def exact_leaf_marginal(params: GhmParams, limit: int = EXACT_MARGINAL_LIMIT) -> np.ndarray:
    """Probability of each leaf configuration in `oracle.leaf_index` order."""
    S, d = params.S, params.topology.d
    if S**d > limit:
        raise EnumerationLimitError(f"S^d = {S**d} leaf configurations exceeds the limit {limit}")
    X = np.array(list(itertools.product(range(1, S + 1), repeat=d)), dtype=float)
    return np.exp(mp.log_evidence(params, X))


@dataclass(frozen=True)
class Recovery:
    tv: float
    noise_scale: float
    n: int


def eval_recovery(params: GhmParams, samples, limit: int = EXACT_MARGINAL_LIMIT) -> Recovery:
    """Total variation between the empirical law of ``samples`` and the leaf marginal.

    ``noise_scale`` is ``1/2 sum_x sqrt(p(x)(1 - p(x)) / n)``, the size of the
    TV an exact sampler would typically show at this ``n``.
    """
    p = exact_leaf_marginal(params, limit)
    x = np.asarray(samples)
    if x.ndim != 2 or x.shape[1] != params.topology.d:
        raise ConfigurationError(f"samples must have shape (n, {params.topology.d}), got {x.shape}")
    if np.any(x < 1) or np.any(x > params.S) or np.any(x != np.round(x)):
        raise ConfigurationError("samples must be rounded states in 1..S")
    n = x.shape[0]
    freq = np.bincount(leaf_index(x, params.S), minlength=p.size) / n
    tv = 0.5 * float(np.abs(freq - p).sum())
    return Recovery(tv, 0.5 * float(np.sqrt(p * (1 - p) / n).sum()), n)
