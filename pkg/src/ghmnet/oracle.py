"""Brute-force posteriors by enumerating every configuration of the tree.

Only usable on tiny instances; everything else in the library is checked
against these functions.  Configurations are visited in a fixed order
(mixed-radix index, root digit most significant) in fixed-size chunks, so
results do not depend on chunking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EnumerationLimitError, InvalidNoiseError, InvalidSampleError
from .ghm import GhmParams, log_joint

ENUMERATION_CAP = 10**7
CHUNK = 1 << 15


@dataclass(frozen=True)
class PosteriorTable:
    """Per-leaf posteriors ``marginals[v, s]`` and the posterior mean of ``x``."""

    marginals: np.ndarray
    mean: np.ndarray


def _configs(S, sizes, chunk=CHUNK):
    """Yield lists of layer arrays covering all ``S ** sum(sizes)`` configurations."""
    n_vars = sum(sizes)
    total = S**n_vars
    powers = S ** np.arange(n_vars - 1, -1, -1, dtype=np.int64)
    bounds = np.cumsum([0] + list(sizes))
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        digits = (idx[:, None] // powers[None, :]) % S + 1
        yield [digits[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes))]


def _check_cap(S, n_vars, cap):
    cap = ENUMERATION_CAP if cap is None else cap
    if S**n_vars > cap:
        raise EnumerationLimitError(
            f"enumeration needs {S}^{n_vars} = {S**n_vars} configurations, cap is {cap}"
        )


def _check_leaves(params, x):
    x = np.asarray(x)
    if x.shape != (params.topology.d,):
        raise InvalidSampleError(f"expected {params.topology.d} leaves, got shape {x.shape}")
    if np.any(x < 1) or np.any(x > params.S) or np.any(x != np.round(x)):
        raise InvalidSampleError(f"leaf states must lie in 1..{params.S}")
    return x.astype(int)


def posterior_label(params: GhmParams, x, cap: int | None = None) -> np.ndarray:
    """``mu(y | x)`` by summing the joint over every hidden configuration."""
    x = _check_leaves(params, x)
    sizes = params.topology.layer_sizes[:-1]
    _check_cap(params.S, sum(sizes), cap)
    acc = np.full(params.S, -np.inf)
    for layers in _configs(params.S, sizes):
        leaves = np.broadcast_to(x, (layers[0].shape[0], x.size))
        lj = log_joint(params, layers + [leaves])
        y = layers[0][:, 0] - 1
        for s in range(params.S):
            sel = lj[y == s]
            if sel.size:
                acc[s] = np.logaddexp(acc[s], logsumexp(sel))
    return np.exp(acc - logsumexp(acc))


def posterior_denoise(params: GhmParams, z, sigma2: float = 1.0, cap: int | None = None) -> PosteriorTable:
    """Leaf posteriors and ``E[x | z]`` for ``z = x + N(0, sigma2 I)``."""
    if not sigma2 > 0:
        raise InvalidNoiseError(f"noise variance must be positive, got {sigma2}")
    z = np.asarray(z, dtype=float)
    d, S = params.topology.d, params.S
    if z.shape != (d,):
        raise InvalidSampleError(f"expected {d} observations, got shape {z.shape}")
    sizes = params.topology.layer_sizes
    _check_cap(S, sum(sizes), cap)
    run_max = -np.inf
    acc = np.zeros((d, S))
    total = 0.0
    for layers in _configs(S, sizes):
        x = layers[-1]
        lw = log_joint(params, layers) - ((x - z) ** 2).sum(axis=1) / (2 * sigma2)
        m = lw.max()
        if m == -np.inf:
            continue
        if m > run_max:
            scale = np.exp(run_max - m) if run_max > -np.inf else 0.0
            acc *= scale
            total *= scale
            run_max = m
        w = np.exp(lw - run_max)
        total += w.sum()
        for s in range(S):
            acc[:, s] += ((x == s + 1) * w[:, None]).sum(axis=0)
    marg = acc / total
    return PosteriorTable(marg, marg @ np.arange(1, S + 1))


def leaf_marginal(params: GhmParams, cap: int | None = None) -> np.ndarray:
    """Probability of every leaf configuration, indexed in mixed radix (leaf 0 most significant)."""
    S, d = params.S, params.topology.d
    sizes = params.topology.layer_sizes
    _check_cap(S, sum(sizes), cap)
    powers = S ** np.arange(d - 1, -1, -1, dtype=np.int64)
    out = np.zeros(S**d)
    for layers in _configs(S, sizes):
        idx = (layers[-1] - 1) @ powers
        out += np.bincount(idx, weights=np.exp(log_joint(params, layers)), minlength=S**d)
    return out


def leaf_index(x, S: int) -> np.ndarray:
    """Mixed-radix index of leaf configurations (inverse of the `leaf_marginal` layout)."""
    x = np.asarray(x, dtype=np.int64)
    d = x.shape[-1]
    return (x - 1) @ (S ** np.arange(d - 1, -1, -1, dtype=np.int64))
