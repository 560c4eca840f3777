"""Exact sum-product belief propagation on the tree, in the probability domain.

Naming follows the data flow rather than the drawing: the *down* pass runs
from the leaves to the root (``nu_down``), the *up* pass runs from the root
back to the leaves (``nu_up``).  Classification uses the down pass only.

All functions accept a single input (shape ``(d,)``) or a batch
(``(n, d)``) and return matching shapes.  Beliefs are renormalized after
every node update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidNoiseError, InvalidSampleError
from .ghm import GhmParams


@dataclass
class BeliefState:
    """Per-layer belief arrays of shape ``(n, d_l, S)``.

    ``down[l]`` is the normalized product of messages arriving at layer-``l``
    nodes from their subtree (the leaf evidence for ``l = L``); ``up[l]``
    collects everything outside the subtree; ``child_msgs[l]`` holds the
    message each layer-``l`` node sends to its parent.  The node marginal is
    ``up * down`` renormalized.
    """

    down: list
    up: list | None
    child_msgs: list
    posterior: np.ndarray | None = None

    def marginal(self, layer: int) -> np.ndarray:
        return _normalize(self.up[layer] * self.down[layer])


def _normalize(p):
    return p / p.sum(axis=-1, keepdims=True)


def _batch(a, d, name):
    a = np.asarray(a)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.ndim != 2 or a.shape[1] != d:
        raise InvalidSampleError(f"{name} must have {d} entries per row, got shape {np.shape(a)}")
    return a, single


def _perm(order, m):
    """Child visiting order for a layer with ``m`` children per parent."""
    if order is None:
        return list(range(m))
    perm = list(order(m)) if callable(order) else list(order)
    if sorted(perm) != list(range(m)):
        raise ValueError(f"order {perm} is not a permutation of range({m})")
    return perm


def _exclusive_products(msgs, order):
    """For msgs of shape (n, P, m, S) return prod over the other m-1 children."""
    m = msgs.shape[2]
    out = np.ones_like(msgs)
    for k in range(m):
        for j in order:
            if j != k:
                out[:, :, k] *= msgs[:, :, j]
    return out


def _down_pass(params: GhmParams, leaf_down, order=None):
    topo = params.topology
    down = [None] * (topo.L + 1)
    msgs = [None] * (topo.L + 1)
    down[topo.L] = _normalize(leaf_down)
    n = leaf_down.shape[0]
    for l in range(topo.L, 0, -1):
        tables = params.tables(l)[topo.rank_index(l)]  # (d_l, S, S)
        msg = np.einsum("vsa,nva->nvs", tables, down[l])
        msg = msg / msg.max(axis=-1, keepdims=True)
        msgs[l] = msg
        grouped = msg.reshape(n, topo.layer_sizes[l - 1], topo.m[l], params.S)
        prod = np.ones((n, topo.layer_sizes[l - 1], params.S))
        for k in _perm(order, topo.m[l]):
            prod = prod * grouped[:, :, k]
        down[l - 1] = _normalize(prod)
    return down, msgs


def _up_pass(params: GhmParams, msgs, order=None):
    topo = params.topology
    n = msgs[topo.L].shape[0]
    up = [None] * (topo.L + 1)
    up[0] = np.broadcast_to(params.root_marginal, (n, 1, params.S)).copy()
    for l in range(1, topo.L + 1):
        grouped = msgs[l].reshape(n, topo.layer_sizes[l - 1], topo.m[l], params.S)
        sib = _exclusive_products(grouped, _perm(order, topo.m[l])).reshape(n, topo.layer_sizes[l], params.S)
        parent_up = up[l - 1][:, topo.parent_index(l)]
        tables = params.tables(l)[topo.rank_index(l)]
        # nu_up_v(s) = sum_b psi(b, s) * nu_up_pa(b) * prod_sib msg(b)
        up[l] = _normalize(np.einsum("vbs,nvb->nvs", tables, parent_up * sib))
    return up


def bp_classify(params: GhmParams, x, return_state: bool = False, order=None):
    """Posterior ``mu(y | x)`` over labels ``1..S``."""
    x, single = _batch(x, params.topology.d, "x")
    if np.any(x < 1) or np.any(x > params.S) or np.any(x != np.round(x)):
        raise InvalidSampleError(f"leaf states must lie in 1..{params.S}")
    leaf = np.eye(params.S)[x.astype(int) - 1]
    down, msgs = _down_pass(params, leaf, order)
    post = _normalize(down[0][:, 0] * params.root_marginal)
    out = post[0] if single else post
    if return_state:
        return out, BeliefState(down, None, msgs, post)
    return out


def leaf_likelihood(z, sigma2: float, S: int) -> np.ndarray:
    """Gaussian leaf evidence ``exp(-(s - z)^2 / (2 sigma2))``, rescaled per leaf."""
    states = np.arange(1, S + 1)
    logl = -((states - np.asarray(z, float)[..., None]) ** 2) / (2 * sigma2)
    return np.exp(logl - logl.max(axis=-1, keepdims=True))


def bp_denoise(params: GhmParams, z, sigma2: float = 1.0, return_state: bool = False, order=None):
    """Leaf posteriors ``mu(x_v | z)`` and the posterior mean ``E[x | z]``.

    Returns ``(posteriors, mean)`` with shapes ``(..., d, S)`` and ``(..., d)``.
    """
    if not sigma2 > 0:
        raise InvalidNoiseError(f"noise variance must be positive, got {sigma2}")
    z, single = _batch(z, params.topology.d, "z")
    z = z.astype(float)
    down, msgs = _down_pass(params, leaf_likelihood(z, sigma2, params.S), order)
    up = _up_pass(params, msgs, order)
    state = BeliefState(down, up, msgs)
    post = state.marginal(params.topology.L)
    state.posterior = post
    mean = post @ params.states
    if single:
        post, mean = post[0], mean[0]
    if return_state:
        return post, mean, state
    return post, mean
