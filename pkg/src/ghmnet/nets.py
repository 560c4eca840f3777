"""ConvNet classifier and U-Net denoiser on the tree, plus their weights.

Every node of layer ``l`` with rank ``r`` runs the same two-hidden-layer
block ``NN(h) = W1 ReLU(W2 ReLU(W3 [h; 1]))``; blocks are keyed by
``(direction, layer, rank)`` with direction ``"down"`` (encoder, leaves to
root) or ``"up"`` (decoder).  The ConvNet has only ``"down"`` blocks and its
leaf blocks read ``[x_v; 1]``.

Forward passes optionally return a cache that `train` uses for reverse-mode
differentiation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .errors import ConfigurationError, InvalidNoiseError, InvalidParamsError, InvalidSampleError
from .ghm import GhmParams
from .mp import CLASSIFY, DENOISE, DOWN, UP
from .relu_approx import FactoredMatrix, as_dense, build_leaf_block, build_lse_block, op_norm, relu
from .topology import TreeTopology, build

CONVNET, UNET = "convnet", "unet"
FORMAT_TAG = "ghmnet-weights"

# dense middle matrices larger than this stay factored
DENSIFY_LIMIT = 4_000_000


@dataclass(eq=False)
class NetWeights:
    """Weight triples ``(W1, W2, W3)`` per ``(direction, layer, rank)``.

    ``D`` is the nominal hidden width.  Random and trained networks use it
    for every block; constructed networks keep each block at the width its
    construction needs (at most ``D``) instead of zero-padding.  ``W2`` may
    be a `FactoredMatrix`.  ``B`` is the operator-norm budget, if any.
    """

    kind: str
    topology: TreeTopology
    S: int
    D: int
    blocks: dict
    B: float | None = None
    meta: dict = field(default_factory=dict)

    def keys(self):
        return sorted(self.blocks, key=lambda k: (k[0] != DOWN, k[1], k[2]))

    def block(self, direction, layer, rank):
        key = (direction, layer, rank)
        if key not in self.blocks:
            raise ConfigurationError(f"network has no block {key}")
        return self.blocks[key]

    def s_in(self, layer: int) -> int:
        return 2 if self.kind == CONVNET and layer == self.topology.L else self.S + 1

    def norm(self) -> float:
        """``max`` over all blocks and matrices of the operator norm."""
        return max(op_norm(W) for blk in self.blocks.values() for W in blk)

    def max_block_widths(self) -> tuple:
        return (
            max(b[2].shape[0] for b in self.blocks.values()),
            max(b[0].shape[1] for b in self.blocks.values()),
        )

    def densified(self) -> "NetWeights":
        """Copy with every factored ``W2`` multiplied out (only for small blocks)."""
        out = {}
        for k, (W1, W2, W3) in self.blocks.items():
            if isinstance(W2, FactoredMatrix):
                r, c = W2.shape
                if r * c > DENSIFY_LIMIT:
                    raise ConfigurationError(f"block {k} is too large to densify ({r} x {c})")
                W2 = W2.toarray()
            out[k] = (W1, W2, W3)
        return replace(self, blocks=out)

    def map(self, fn) -> "NetWeights":
        return replace(self, blocks={k: tuple(fn(W) for W in blk) for k, blk in self.blocks.items()})

    def zip_map(self, other, fn) -> "NetWeights":
        return replace(
            self,
            blocks={k: tuple(fn(a, b) for a, b in zip(blk, other.blocks[k])) for k, blk in self.blocks.items()},
        )

    def copy(self) -> "NetWeights":
        return self.map(lambda W: W if isinstance(W, FactoredMatrix) else np.array(W, dtype=float))


def _check_shapes(weights: NetWeights, kind: str):
    if weights.kind != kind:
        raise ConfigurationError(f"expected a {kind} network, got {weights.kind}")
    S = weights.S
    for (direction, layer, rank), (W1, W2, W3) in weights.blocks.items():
        if W1.shape[0] != S or W3.shape[1] != weights.s_in(layer):
            raise ConfigurationError(f"block {(direction, layer, rank)} has incompatible shapes")
        if W2.shape != (W1.shape[1], W3.shape[0]):
            raise ConfigurationError(f"block {(direction, layer, rank)} middle matrix shape {W2.shape}")


def block_forward(blk, X, cache: bool = False):
    """Apply one block to the rows of ``X`` (inputs without the trailing 1)."""
    W1, W2, W3 = blk
    n = X.shape[0]
    Xa = np.concatenate([X, np.ones((n, 1))], axis=1)
    if cache:
        z1 = Xa @ W3.T
        a1 = relu(z1)
        z2 = W2.apply(a1) if isinstance(W2, FactoredMatrix) else a1 @ W2.T
        a2 = relu(z2)
        return a2 @ W1.T, (Xa, z1, a1, z2, a2)
    out = np.empty((n, W1.shape[0]))
    step = max(1, 2_000_000 // max(W3.shape[0], 1))
    for s in range(0, n, step):
        a1 = relu(Xa[s : s + step] @ W3.T)
        z2 = W2.apply(a1) if isinstance(W2, FactoredMatrix) else a1 @ W2.T
        out[s : s + step] = relu(z2) @ W1.T
    return out, None


def _by_rank(weights, direction, layer, X, cache):
    """Run the rank-specific block on every node of ``layer``; X is (n, d_l, S_in)."""
    topo = weights.topology
    m = topo.m[layer]
    n = X.shape[0]
    out = np.empty((n, X.shape[1], weights.S))
    caches = {}
    for r in range(m):
        chunk = X[:, r::m]
        flat = chunk.reshape(-1, chunk.shape[2])
        res, c = block_forward(weights.block(direction, layer, r), flat, cache)
        out[:, r::m] = res.reshape(n, chunk.shape[1], weights.S)
        caches[r] = c
    return out, caches


def _argmax_normalize(h):
    idx = h.argmax(axis=-1)
    top = np.take_along_axis(h, idx[..., None], axis=-1)
    return h - top, idx


def _pool(topo, layer, q):
    n, _, S = q.shape
    return q.reshape(n, topo.layer_sizes[layer - 1], topo.m[layer], S).sum(axis=2)


def convnet_forward(weights: NetWeights, x, return_cache: bool = False):
    """Class probabilities ``softmax(h_root)``; ``x`` is ``(d,)`` or ``(n, d)``."""
    _check_shapes(weights, CONVNET)
    topo = weights.topology
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != topo.d:
        raise InvalidSampleError(f"expected {topo.d} leaves, got shape {x.shape}")
    L = topo.L
    h = [None] * (L + 1)
    h[L] = x[..., None]
    q, blocks, argmax = [None] * (L + 1), [None] * (L + 1), [None] * (L + 1)
    for l in range(L, 0, -1):
        q[l], blocks[l] = _by_rank(weights, DOWN, l, h[l], return_cache)
        h[l - 1], argmax[l - 1] = _argmax_normalize(_pool(topo, l, q[l]))
    p = softmax(h[0][:, 0], axis=-1)
    out = p[0] if single else p
    if return_cache:
        return out, {"h": h, "q": q, "blocks": blocks, "argmax": argmax, "p": p}
    return out


def unet_forward(weights: NetWeights, z, sigma2: float = 1.0, return_cache: bool = False):
    """Denoiser output ``sum_s s softmax(b_up_leaf)_s``; ``z`` is ``(d,)`` or ``(n, d)``."""
    _check_shapes(weights, UNET)
    if not sigma2 > 0:
        raise InvalidNoiseError(f"noise variance must be positive, got {sigma2}")
    topo, S = weights.topology, weights.S
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != topo.d:
        raise InvalidSampleError(f"expected {topo.d} observations, got shape {z.shape}")
    L = topo.L
    states = np.arange(1, S + 1, dtype=float)
    h = [None] * (L + 1)
    h[L] = -((states - z[..., None]) ** 2) / (2 * sigma2)
    q, dblocks, dargs = [None] * (L + 1), [None] * (L + 1), [None] * (L + 1)
    for l in range(L, 0, -1):
        a, dargs[l] = _argmax_normalize(h[l])
        q[l], dblocks[l] = _by_rank(weights, DOWN, l, a, return_cache)
        h[l - 1] = _pool(topo, l, q[l])
    b, u = [None] * (L + 1), [None] * (L + 1)
    ublocks, uargs = [None] * (L + 1), [None] * (L + 1)
    b[0] = h[0]
    for l in range(1, L + 1):
        u[l] = b[l - 1][:, topo.parent_index(l)]
        c, uargs[l] = _argmax_normalize(u[l] - q[l])
        out, ublocks[l] = _by_rank(weights, UP, l, c, return_cache)
        b[l] = out + h[l]
    P = softmax(b[L], axis=-1)
    mean = P @ states
    res = mean[0] if single else mean
    if return_cache:
        cache = {
            "h": h, "q": q, "u": u, "b": b, "P": P, "mean": mean,
            "down_blocks": dblocks, "up_blocks": ublocks, "down_argmax": dargs, "up_argmax": uargs,
        }
        return res, cache
    return res


def block_fns(weights: NetWeights) -> dict:
    """The blocks as `mp.amp_run` message maps."""
    fns = {}
    for key, blk in weights.blocks.items():
        layer = key[1]
        if weights.kind == CONVNET and layer == weights.topology.L:
            fns[key] = lambda x, blk=blk: block_forward(blk, np.asarray(x, float).reshape(-1, 1))[0]
        else:
            fns[key] = lambda h, blk=blk: block_forward(blk, np.asarray(h, float))[0]
    return fns


def _log_prior(params):
    mu = params.root_marginal
    if np.any(mu <= 0):
        raise InvalidParamsError("construction needs a root marginal with positive entries")
    return np.log(mu)


def classifier_width(S, K, d, L, delta) -> int:
    return 4 * math.ceil(S * S * K * K * d * 3**L / delta)


def denoiser_width(S, K, d, L, delta) -> int:
    return 4 * math.ceil(S**3 * K * K * d * 18**L / delta)


def _triple(block):
    return (block.W1, block.W2, block.W3)


def construct_classifier(params: GhmParams, delta: float) -> NetWeights:
    """ConvNet whose log-probabilities are within ``delta`` of the Bayes classifier's.

    Leaf blocks approximate ``log psi(., x)`` and interior blocks the
    log-sum-exp maps, each to ``delta / (d 3^L)``.  A non-uniform root
    marginal enters as a constant ``log mu / m1`` added by every layer-1
    block, so the pooled root message carries ``log mu``.
    """
    if not params.strict:
        raise InvalidParamsError("construction needs bounded tables (strict params)")
    if not delta > 0:
        raise InvalidParamsError(f"delta must be positive, got {delta}")
    topo, S, K = params.topology, params.S, params.K
    L, d = topo.L, topo.d
    per_fn = delta / (d * 3**L)
    prior = _log_prior(params)
    uniform = np.allclose(prior, prior[0], rtol=0, atol=0)
    blocks = {}
    for l in range(1, L + 1):
        bias = None if (l != 1 or uniform) else prior / topo.m[1]
        for r in range(topo.m[l]):
            psi = params.table(l, r)
            if l == L:
                blk = build_leaf_block(psi, K, per_fn, out_bias=bias)
            else:
                blk = build_lse_block(psi, "down", K, per_fn, out_bias=bias)
            blocks[(DOWN, l, r)] = _triple(blk)
    D = classifier_width(S, K, d, L, delta)
    net = NetWeights(CONVNET, topo, S, D, blocks, meta={"delta": delta, "per_fn_delta": per_fn})
    widths = net.max_block_widths()
    assert max(widths) <= D, (widths, D)
    return net


def construct_denoiser(params: GhmParams, delta: float) -> NetWeights:
    """U-Net whose output is within ``delta`` (sup norm) of the Bayes denoiser.

    Every block approximates its log-sum-exp map to ``delta / (d 18^L S)``.
    A non-uniform root marginal is folded in so that the decoder starts from
    ``h_root + log mu``: with ``m1 >= 2`` each layer-1 encoder block adds
    ``log mu / (m1 - 1)`` (the decoder only ever sees the root message minus
    one child's contribution); with ``m1 = 1`` that difference is always
    zero, and the layer-1 decoder block uses the table
    ``mu(a) psi(a, s)`` instead.
    """
    if not params.strict:
        raise InvalidParamsError("construction needs bounded tables (strict params)")
    if not delta > 0:
        raise InvalidParamsError(f"delta must be positive, got {delta}")
    topo, S, K = params.topology, params.S, params.K
    L, d = topo.L, topo.d
    per_fn = delta / (d * 18**L * S)
    prior = _log_prior(params)
    uniform = np.allclose(prior, prior[0], rtol=0, atol=0)
    m1 = topo.m[1]
    blocks = {}
    for l in range(1, L + 1):
        for r in range(topo.m[l]):
            psi = params.table(l, r)
            down_bias = prior / (m1 - 1) if (l == 1 and not uniform and m1 >= 2) else None
            blocks[(DOWN, l, r)] = _triple(build_lse_block(psi, "down", K, per_fn, out_bias=down_bias))
            table = None
            if l == 1 and not uniform and m1 == 1:
                table = psi.T * params.root_marginal[None, :]
            blocks[(UP, l, r)] = _triple(build_lse_block(psi, "up", K, per_fn, table=table))
    D = denoiser_width(S, K, d, L, delta)
    net = NetWeights(UNET, topo, S, D, blocks, meta={"delta": delta, "per_fn_delta": per_fn})
    widths = net.max_block_widths()
    assert max(widths) <= D, (widths, D)
    return net


def random_init(topology: TreeTopology, S: int, D: int, scale: float, seed=None, kind: str = UNET) -> NetWeights:
    """Entries iid uniform on ``[-scale, scale]``, all blocks of width ``D``."""
    if D < 1:
        raise ConfigurationError(f"width must be positive, got {D}")
    if kind not in (CONVNET, UNET):
        raise ConfigurationError(f"unknown network kind {kind!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    directions = (DOWN,) if kind == CONVNET else (DOWN, UP)
    blocks = {}
    for direction in directions:
        for l in range(1, topology.L + 1):
            s_in = 2 if kind == CONVNET and l == topology.L else S + 1
            for r in range(topology.m[l]):
                blocks[(direction, l, r)] = tuple(
                    rng.uniform(-scale, scale, size=shape) for shape in ((S, D), (D, D), (D, s_in))
                )
    return NetWeights(kind, topology, S, D, blocks)


def project_matrix(W, B: float):
    """Clip singular values of ``W`` at ``B``; returns ``W`` itself when already inside."""
    if isinstance(W, FactoredMatrix):
        if op_norm(W) <= B:
            return W
        W = as_dense(W)
    W = np.asarray(W, dtype=float)
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    if s.size == 0 or s[0] <= B:
        return W
    return (U * np.minimum(s, B)) @ Vt


def project_norms(weights: NetWeights, B: float) -> NetWeights:
    """Operator-norm projection block by block."""
    if not B > 0:
        raise ConfigurationError(f"norm budget must be positive, got {B}")
    out = weights.map(lambda W: project_matrix(W, B))
    out.B = B
    return out


def _encode(W):
    if isinstance(W, FactoredMatrix):
        return {"factors": [f.tolist() for f in W.factors]}
    return np.asarray(W).tolist()


def _decode(obj):
    if isinstance(obj, dict):
        return FactoredMatrix([np.array(f, dtype=float) for f in obj["factors"]])
    return np.array(obj, dtype=float)


def to_dict(weights: NetWeights) -> dict:
    return {
        "format": FORMAT_TAG,
        "version": 1,
        "kind": weights.kind,
        "S": weights.S,
        "D": weights.D,
        "L": weights.topology.L,
        "m": list(weights.topology.branching),
        "B": weights.B,
        "meta": weights.meta,
        "blocks": [
            {"direction": k[0], "layer": k[1], "rank": k[2], "W1": _encode(b[0]), "W2": _encode(b[1]), "W3": _encode(b[2])}
            for k, b in ((k, weights.blocks[k]) for k in weights.keys())
        ],
    }


def from_dict(doc: dict) -> NetWeights:
    if doc.get("format") != FORMAT_TAG:
        raise ConfigurationError("not a network weight file")
    topo = build(doc["L"], doc["m"])
    blocks = {
        (b["direction"], int(b["layer"]), int(b["rank"])): (_decode(b["W1"]), _decode(b["W2"]), _decode(b["W3"]))
        for b in doc["blocks"]
    }
    net = NetWeights(doc["kind"], topo, int(doc["S"]), int(doc["D"]), blocks, doc.get("B"), doc.get("meta", {}))
    _check_shapes(net, net.kind)
    return net


def save_weights(weights: NetWeights, path) -> None:
    """Write JSON; Python's float repr makes the round trip bit-exact."""
    Path(path).write_text(json.dumps(to_dict(weights)))


def load_weights(path) -> NetWeights:
    return from_dict(json.loads(Path(path).read_text()))


def task_of(weights: NetWeights) -> str:
    return CLASSIFY if weights.kind == CONVNET else DENOISE
