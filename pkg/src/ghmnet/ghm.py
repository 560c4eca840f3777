"""Generative hierarchical models: transition tables, sampling, likelihoods.

States are the integers ``1..S``.  Transition tables are row-stochastic
conditionals ``psi[l][rank, parent_state, child_state]`` so the joint law is

    mu(y, x1, ..., xL) = mu(y) * prod_edges psi[l][rank(v)](x_pa(v), x_v)

and ancestral sampling is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli_w

from .errors import InvalidParamsError, InvalidSampleError
from .topology import TreeTopology, build

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

ROW_SUM_TOL = 1e-9
# entries landing on 1/K up to rounding still count as in bounds
BOUND_RTOL = 1e-12


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class GhmParams:
    """Transition tables of a GHM on ``topology`` with alphabet ``[S]``.

    ``psi[l - 1]`` has shape ``(m[l], S, S)``; entry ``[r, s, a]`` is the
    probability that a rank-``r`` child on layer ``l`` is in state ``a + 1``
    given its parent is in state ``s + 1``.

    ``strict=False`` skips the boundedness check; it exists for oracle tests
    that need deterministic (copy) transitions.
    """

    topology: TreeTopology
    S: int
    root_marginal: np.ndarray
    psi: tuple
    K: float
    strict: bool = field(default=True)

    def __post_init__(self):
        S = self.S
        if S < 2:
            raise InvalidParamsError(f"alphabet size must be >= 2, got {S}")
        root = np.asarray(self.root_marginal, dtype=float)
        if root.shape != (S,) or np.any(root < 0) or abs(root.sum() - 1) > ROW_SUM_TOL:
            raise InvalidParamsError("root marginal must be a probability vector over [S]")
        root = root / root.sum()
        root.setflags(write=False)
        object.__setattr__(self, "root_marginal", root)
        if len(self.psi) != self.topology.L:
            raise InvalidParamsError(f"expected {self.topology.L} layers of tables, got {len(self.psi)}")
        tables = []
        for layer, t in enumerate(self.psi, start=1):
            t = np.array(t, dtype=float)
            if t.shape != (self.topology.m[layer], S, S):
                raise InvalidParamsError(
                    f"layer {layer} tables have shape {t.shape}, "
                    f"expected {(self.topology.m[layer], S, S)}"
                )
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=2) - 1) > ROW_SUM_TOL):
                raise InvalidParamsError(f"layer {layer} tables are not row-stochastic")
            t = t / t.sum(axis=2, keepdims=True)
            if self.strict:
                if not self.K > 1:
                    raise InvalidParamsError(f"boundedness constant K must exceed 1, got {self.K}")
                if t.min() < (1 - BOUND_RTOL) / self.K or t.max() > self.K:
                    raise InvalidParamsError(
                        f"layer {layer} entries span [{t.min():.6g}, {t.max():.6g}], "
                        f"outside [1/K, K] with K={self.K}"
                    )
            t.setflags(write=False)
            tables.append(t)
        object.__setattr__(self, "psi", tuple(tables))

    def tables(self, layer: int) -> np.ndarray:
        """Tables feeding ``layer`` (``1 <= layer <= L``), shape ``(m[layer], S, S)``."""
        return self.psi[layer - 1]

    def table(self, layer: int, rank: int) -> np.ndarray:
        return self.psi[layer - 1][rank]

    @property
    def states(self) -> np.ndarray:
        return np.arange(1, self.S + 1, dtype=float)

    def min_entry(self) -> float:
        return min(float(t.min()) for t in self.psi)

    def max_entry(self) -> float:
        return max(float(t.max()) for t in self.psi)

    def leaf_prior_mean(self) -> np.ndarray:
        """E[x_v] for every leaf, by propagating marginals down the tree."""
        marg = self.root_marginal[None, :]
        for layer in range(1, self.topology.L + 1):
            t = self.tables(layer)
            # marginal of each child = parent marginal @ table of its rank
            child = np.einsum("ps,rsa->pra", marg, t)
            marg = child.reshape(-1, self.S)
        return marg @ self.states


@dataclass
class Sample:
    """One draw (or a batch, with a leading axis) from the model.

    ``layers[0]`` is the label ``y`` with shape ``(..., 1)``, ``layers[l]``
    the states on layer ``l``; ``layers[-1]`` are the leaves.
    """

    layers: list

    @property
    def y(self):
        return self.layers[0][..., 0]

    @property
    def hidden(self):
        return self.layers[1:-1]

    @property
    def x(self):
        return self.layers[-1]


def _floor_mix(rows: np.ndarray, floor: float) -> np.ndarray:
    """Shrink each probability row toward uniform just enough that min >= floor."""
    S = rows.shape[-1]
    pmin = rows.min(axis=-1, keepdims=True)
    gap = 1.0 / S - pmin
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(pmin >= floor, 0.0, (floor - pmin) / np.where(gap > 0, gap, 1.0))
    lam = np.clip(lam, 0.0, 1.0)
    out = (1 - lam) * rows + lam / S
    return out / out.sum(axis=-1, keepdims=True)


def generate_params(
    topology: TreeTopology,
    S: int,
    K: float,
    mode: str = "random",
    seed=None,
    tables: Sequence | None = None,
    root_marginal=None,
    concentration: float = 1.0,
) -> GhmParams:
    """Create model parameters satisfying the factorization and [1/K, K] bound.

    Modes:
      * ``"random"``: rows drawn iid from a symmetric Dirichlet, then each row
        is pulled toward uniform by the smallest amount that lifts its minimum
        to ``1/K`` (a clip-and-renormalize that lands exactly on the bound).
        This distribution over instances is a convention of this library.
      * ``"uniform"``: every row is uniform.
      * ``"explicit"``: ``tables`` (one ``(m[l], S, S)`` array per layer).

    Row-stochastic rows have minimum at most ``1/S``, so ``K >= S`` is needed
    for anything but an error.
    """
    if S < 2:
        raise InvalidParamsError(f"alphabet size must be >= 2, got {S}")
    if not K > 1:
        raise InvalidParamsError(f"K must exceed 1, got {K}")
    rng = _as_rng(seed)
    if mode == "explicit":
        if tables is None:
            raise InvalidParamsError("explicit mode needs tables")
        psi = [np.asarray(t, dtype=float) for t in tables]
        root = np.full(S, 1.0 / S) if root_marginal is None else np.asarray(root_marginal, float)
        return GhmParams(topology, S, root, tuple(psi), float(K))
    if K < S:
        raise InvalidParamsError(
            f"no row-stochastic table over {S} states has all entries >= 1/K with K={K}"
        )
    if mode == "uniform":
        psi = [np.full((topology.m[l], S, S), 1.0 / S) for l in range(1, topology.L + 1)]
        root = np.full(S, 1.0 / S) if root_marginal is None else np.asarray(root_marginal, float)
    elif mode == "random":
        psi = []
        for l in range(1, topology.L + 1):
            rows = rng.dirichlet(np.full(S, concentration), size=(topology.m[l], S))
            psi.append(_floor_mix(rows, 1.0 / K))
        if root_marginal is None:
            root = _floor_mix(rng.dirichlet(np.full(S, concentration)), 1.0 / K)
        else:
            root = np.asarray(root_marginal, float)
    else:
        raise InvalidParamsError(f"unknown generation mode {mode!r}")
    params = GhmParams(topology, S, root, tuple(psi), float(K))
    # verified, not assumed
    assert params.min_entry() >= (1 - BOUND_RTOL) / K and params.max_entry() <= K
    return params


def copy_chain_params(topology: TreeTopology, S: int, root_marginal=None) -> GhmParams:
    """Deterministic ``psi(s, a) = 1{a = s}``: every node copies its parent (tests only)."""
    eye = np.eye(S)
    psi = tuple(np.broadcast_to(eye, (topology.m[l], S, S)).copy() for l in range(1, topology.L + 1))
    root = np.full(S, 1.0 / S) if root_marginal is None else root_marginal
    return GhmParams(topology, S, root, psi, K=math.inf, strict=False)


def sample(params: GhmParams, seed=None, size: int | None = None) -> Sample:
    """Ancestral sampling, top down.  ``size=None`` gives a single draw."""
    rng = _as_rng(seed)
    n = 1 if size is None else int(size)
    topo, S = params.topology, params.S
    y = rng.choice(S, size=(n, 1), p=params.root_marginal)
    layers = [y]
    for l in range(1, topo.L + 1):
        parents = layers[-1]
        cdf = np.cumsum(params.tables(l), axis=2)  # (m, S, S)
        cdf[..., -1] = 1.0
        ranks = np.arange(topo.m[l])
        # rows[i, p, r, :] = cdf of rank r given parent state
        rows = cdf[ranks[None, None, :], parents[:, :, None]]
        u = rng.random((n, parents.shape[1], topo.m[l], 1))
        child = (u > rows).sum(axis=-1)
        layers.append(child.reshape(n, -1))
    layers = [a + 1 for a in layers]
    if size is None:
        layers = [a[0] for a in layers]
    return Sample(layers)


def _check_layers(params, layers):
    topo = params.topology
    if len(layers) != topo.L + 1:
        raise InvalidSampleError(f"sample has {len(layers)} layers, expected {topo.L + 1}")
    out = []
    for l, a in enumerate(layers):
        a = np.asarray(a)
        if a.shape[-1] != topo.layer_sizes[l]:
            raise InvalidSampleError(f"layer {l} has {a.shape[-1]} nodes, expected {topo.layer_sizes[l]}")
        if np.any(a < 1) or np.any(a > params.S) or np.any(a != np.round(a)):
            raise InvalidSampleError(f"layer {l} holds states outside 1..{params.S}")
        out.append(a.astype(int))
    return out


def log_joint(params: GhmParams, sample: Sample | Sequence) -> np.ndarray:
    """Log of the joint probability; ``-inf`` for impossible configurations."""
    layers = sample.layers if isinstance(sample, Sample) else list(sample)
    layers = _check_layers(params, layers)
    topo = params.topology
    with np.errstate(divide="ignore"):
        total = np.log(params.root_marginal)[layers[0][..., 0] - 1]
        for l in range(1, topo.L + 1):
            logt = np.log(params.tables(l))
            par = layers[l - 1][..., topo.parent_index(l)] - 1
            ch = layers[l] - 1
            total = total + logt[topo.rank_index(l), par, ch].sum(axis=-1)
    return total


def joint_prob(params: GhmParams, sample: Sample | Sequence) -> np.ndarray:
    return np.exp(log_joint(params, sample))


def corrupt(x, sigma: float, seed=None) -> np.ndarray:
    """``z = x + sigma * g`` with ``g`` iid standard normal."""
    if not sigma > 0:
        raise InvalidSampleError(f"noise scale must be positive, got {sigma}")
    x = np.asarray(x, dtype=float)
    return x + sigma * _as_rng(seed).standard_normal(x.shape)


def load_tables(path, topology: TreeTopology | None = None, K: float | None = None, strict=True) -> GhmParams:
    """Read explicit tables from a TOML file.

    Layout::

        S = 2
        K = 4.0
        L = 2
        m = [2, 2]
        root_marginal = [0.5, 0.5]

        [layers]
        1 = [ [[0.6, 0.4], [0.3, 0.7]], [[0.5, 0.5], [0.2, 0.8]] ]
        2 = [ ... one S x S row-major matrix per rank ... ]
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    try:
        S = int(doc["S"])
        if topology is None:
            topology = build(int(doc["L"]), doc["m"])
        K = float(doc.get("K", K if K is not None else 0.0))
        layers = doc["layers"]
        tables = [np.array(layers[str(l)], dtype=float) for l in range(1, topology.L + 1)]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidParamsError(f"malformed table file {path}: {exc}") from exc
    root = doc.get("root_marginal")
    root = np.full(S, 1.0 / S) if root is None else np.array(root, dtype=float)
    return GhmParams(topology, S, root, tuple(tables), K, strict=strict)


def save_tables(params: GhmParams, path) -> None:
    """Write ``params`` in the format read by `load_tables` (round-trips exactly)."""
    topo = params.topology
    doc = {
        "S": params.S,
        "K": float(params.K),
        "L": topo.L,
        "m": list(topo.branching),
        "root_marginal": params.root_marginal.tolist(),
        "layers": {str(l): params.tables(l).tolist() for l in range(1, topo.L + 1)},
    }
    Path(path).write_text(tomli_w.dumps(doc))
