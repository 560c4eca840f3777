"""Log-domain message passing, exact and approximate.

One layer-synchronous engine (`amp_run`) drives both tasks.  It takes a
collection of per-(direction, layer, rank) vector maps; plugging in the exact
log-sum-exp maps from `exact_fns` gives exact inference, plugging in ReLU
blocks gives the network the constructions in `nets` realize.

Classification (leaves to root, ``h`` then ``q``)::

    q_v = f(h_v);  h_parent = normalize(sum_children q);  out = softmax(h_r + log mu)

with ``h_v = x_v`` (a symbol) at the leaves.  Denoising::

    q_v = f_down(normalize(h_v));  h_parent = sum_children q
    u_v = b_pa(v);  b_v = f_up(normalize(u_v - q_v)) + h_v;  b_r = h_r + log mu

with ``h_v = -(s - z_v)^2 / (2 sigma2)`` at the leaves.  Note the asymmetry:
the classification pass normalizes after pooling, the denoising pass inside
the map's argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigurationError, InvalidNoiseError, InvalidSampleError, NumericError
from .ghm import GhmParams
from .topology import TreeTopology

DOWN, UP = "down", "up"
CLASSIFY, DENOISE = "classify", "denoise"


def normalize(h) -> np.ndarray:
    """Shift ``h`` along its last axis so the maximum is exactly 0."""
    h = np.asarray(h, dtype=float)
    if np.isnan(h).any():
        raise NumericError("normalize received NaN")
    top = h.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericError("normalize needs at least one finite entry and no +inf")
    return h - top


def _identity(h):
    return np.asarray(h, dtype=float)


class LseFn:
    """``h -> (log sum_a T[s, a] exp(h_a))_s`` for a nonnegative matrix ``T``."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        with np.errstate(divide="ignore"):
            self.log_table = np.log(self.table)

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        # rows that are all -inf (zero-probability tables) give -inf, not a warning
        with np.errstate(invalid="ignore"):
            return logsumexp(self.log_table[None, :, :] + h[:, None, :], axis=2)


class LogColumnFn:
    """Leaf map of the classifier: symbol ``x`` -> ``(log psi(s, x))_s``."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        with np.errstate(divide="ignore"):
            self.log_table = np.log(self.table)

    def __call__(self, x):
        return self.log_table[:, np.asarray(x, dtype=int).reshape(-1) - 1].T


MessageFns = Mapping[tuple, Callable]


def exact_fns(params: GhmParams, task: str) -> dict:
    """Exact maps keyed by ``(direction, layer, rank)``.

    Classification uses only ``"down"`` keys; its layer-``L`` maps take leaf
    symbols.  Denoising uses ``"down"`` (parent <- child, table as is) and
    ``"up"`` (child <- parent, transposed table) on every layer.
    """
    topo = params.topology
    fns = {}
    for l in range(1, topo.L + 1):
        for r in range(topo.m[l]):
            t = params.table(l, r)
            if task == CLASSIFY:
                fns[(DOWN, l, r)] = LogColumnFn(t) if l == topo.L else LseFn(t)
            elif task == DENOISE:
                fns[(DOWN, l, r)] = LseFn(t)
                fns[(UP, l, r)] = LseFn(t.T)
            else:
                raise ConfigurationError(f"unknown task {task!r}")
    return fns


@dataclass
class MessageState:
    """Per-layer message arrays of shape ``(n, d_l, S)`` (leaf ``h`` of the classifier is ``(n, d)``).

    ``output`` is the label posterior (classification) or the per-leaf
    posteriors (denoising); ``mean`` is the denoiser output.
    """

    h_down: list
    q_down: list
    u_up: list | None = None
    b_up: list | None = None
    output: np.ndarray | None = None
    mean: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _apply_by_rank(topo: TreeTopology, layer, fns, direction, arr):
    """Apply the rank-specific map to every node of ``layer``; arr is (n, d_l, ...)."""
    n = arr.shape[0]
    m = topo.m[layer]
    out = None
    for r in range(m):
        key = (direction, layer, r)
        if key not in fns:
            raise ConfigurationError(f"no message map for {key}")
        chunk = arr[:, r::m]
        flat = chunk.reshape((-1,) + chunk.shape[2:])
        res = np.asarray(fns[key](flat), dtype=float)
        res = res.reshape(n, chunk.shape[1], -1)
        if out is None:
            out = np.empty((n, arr.shape[1], res.shape[-1]))
        out[:, r::m] = res
    return out


def _pool(topo, layer, q):
    n, _, S = q.shape
    return q.reshape(n, topo.layer_sizes[layer - 1], topo.m[layer], S).sum(axis=2)


def amp_run(
    topology: TreeTopology,
    S: int,
    fns: MessageFns,
    inputs,
    task: str,
    sigma2: float = 1.0,
    root_log_prior=None,
    normalize_messages: bool = True,
) -> MessageState:
    """Run (approximate) message passing with the supplied maps.

    ``inputs`` are leaf symbols ``(n, d)`` for classification and
    observations ``z`` ``(n, d)`` for denoising.  ``root_log_prior`` (length
    ``S``) is added at the root; ``None`` means a flat prior.
    """
    topo = topology
    norm = normalize if normalize_messages else _identity
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != topo.d:
        raise InvalidSampleError(f"expected {topo.d} leaves per row, got shape {inputs.shape}")
    prior = np.zeros(S) if root_log_prior is None else np.asarray(root_log_prior, dtype=float)
    L = topo.L
    h = [None] * (L + 1)
    q = [None] * (L + 1)

    if task == CLASSIFY:
        h[L] = inputs
        for l in range(L, 0, -1):
            src = h[l][..., None] if l == L else h[l]
            q[l] = _apply_by_rank(topo, l, fns, DOWN, src)
            h[l - 1] = norm(_pool(topo, l, q[l]))
        with np.errstate(invalid="ignore"):  # impossible leaves give NaN, not a warning
            post = softmax(h[0][:, 0] + prior, axis=-1)
        return MessageState(h, q, output=post)

    if task != DENOISE:
        raise ConfigurationError(f"unknown task {task!r}")
    if not sigma2 > 0:
        raise InvalidNoiseError(f"noise variance must be positive, got {sigma2}")
    states = np.arange(1, S + 1, dtype=float)
    h[L] = -((states - inputs[..., None]) ** 2) / (2 * sigma2)
    for l in range(L, 0, -1):
        q[l] = _apply_by_rank(topo, l, fns, DOWN, norm(h[l]))
        h[l - 1] = _pool(topo, l, q[l])
    u = [None] * (L + 1)
    b = [None] * (L + 1)
    b[0] = h[0] + prior
    for l in range(1, L + 1):
        u[l] = b[l - 1][:, topo.parent_index(l)]
        b[l] = _apply_by_rank(topo, l, fns, UP, norm(u[l] - q[l])) + h[l]
    post = softmax(b[L], axis=-1)
    return MessageState(h, q, u, b, output=post, mean=post @ states)


def _root_log_prior(params):
    with np.errstate(divide="ignore"):
        return np.log(params.root_marginal)


def mp_classify(params: GhmParams, x, return_state: bool = False, normalize_messages: bool = True):
    """Label posterior by exact message passing; same shapes as `bp.bp_classify`."""
    x = np.asarray(x)
    single = x.ndim == 1
    if np.any(x < 1) or np.any(x > params.S) or np.any(x != np.round(x)):
        raise InvalidSampleError(f"leaf states must lie in 1..{params.S}")
    state = amp_run(
        params.topology, params.S, exact_fns(params, CLASSIFY), x, CLASSIFY,
        root_log_prior=_root_log_prior(params), normalize_messages=normalize_messages,
    )
    out = state.output[0] if single else state.output
    return (out, state) if return_state else out


def mp_denoise(params: GhmParams, z, sigma2: float = 1.0, return_state: bool = False,
               normalize_messages: bool = True):
    """Leaf posteriors and posterior mean by exact message passing."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    state = amp_run(
        params.topology, params.S, exact_fns(params, DENOISE), z, DENOISE, sigma2=sigma2,
        root_log_prior=_root_log_prior(params), normalize_messages=normalize_messages,
    )
    post, mean = state.output, state.mean
    if single:
        post, mean = post[0], mean[0]
    return (post, mean, state) if return_state else (post, mean)


def log_evidence(params: GhmParams, x) -> np.ndarray:
    """``log mu(x)`` for leaf configurations, via the unnormalized classification pass."""
    x = np.asarray(x)
    single = x.ndim == 1
    state = amp_run(
        params.topology, params.S, exact_fns(params, CLASSIFY), x, CLASSIFY, normalize_messages=False
    )
    with np.errstate(invalid="ignore"):
        out = logsumexp(state.h_down[0][:, 0] + _root_log_prior(params), axis=-1)
    return out[0] if single else out
