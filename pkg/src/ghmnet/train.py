"""Empirical risk minimization for the ConvNet classifier and the U-Net denoiser.

Gradients are hand-written reverse mode through the forward passes in
`nets` (ReLU'(0) = 0, and ``normalize`` routes its gradient through the
lowest-index maximizer).  The optimizer is plain projected gradient descent.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from . import bp, mp
from .errors import ConfigurationError, DivergenceError, InvalidSampleError, NumericError
from .ghm import GhmParams, corrupt, sample
from .nets import CONVNET, UNET, NetWeights, convnet_forward, project_norms, unet_forward
from .relu_approx import FactoredMatrix

EXACT_D2_LIMIT = 10**5


def loss_classify(pred, y) -> np.ndarray:
    """``sum_s (1{y = s} - pred_s)^2``; ``pred`` is ``(S,)`` or ``(n, S)``, labels in ``1..S``."""
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=int)
    onehot = np.eye(pred.shape[-1])[y - 1]
    return ((onehot - pred) ** 2).sum(axis=-1)


def loss_denoise(pred, x) -> np.ndarray:
    """``d^-1 ||x - pred||^2`` per row."""
    pred = np.asarray(pred, dtype=float)
    x = np.asarray(x, dtype=float)
    if pred.shape != x.shape:
        raise InvalidSampleError(f"prediction shape {pred.shape} does not match target {x.shape}")
    return ((x - pred) ** 2).mean(axis=-1)


@dataclass
class Batch:
    """Training pairs: ``inputs`` are leaves (classify) or noisy leaves (denoise)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)


def make_batch(params: GhmParams, task: str, n: int, seed=None, sigma2: float = 1.0) -> Batch:
    """iid pairs from the model; denoising draws fresh Gaussian noise per sample."""
    rng = np.random.default_rng(seed)
    s = sample(params, rng, size=n)
    if task == "classify":
        return Batch(s.x.astype(float), s.y)
    if task == "denoise":
        return Batch(corrupt(s.x, np.sqrt(sigma2), rng), s.x.astype(float))
    raise ConfigurationError(f"unknown task {task!r}")


def _dense(weights: NetWeights) -> NetWeights:
    if any(isinstance(b[1], FactoredMatrix) for b in weights.blocks.values()):
        return weights.densified()
    return weights


def empirical_risk(weights: NetWeights, batch: Batch, sigma2: float = 1.0) -> float:
    if weights.kind == CONVNET:
        return float(loss_classify(convnet_forward(weights, batch.inputs), batch.targets).mean())
    return float(loss_denoise(unet_forward(weights, batch.inputs, sigma2), batch.targets).mean())


def _block_backward(blk, cache, dout):
    W1, W2, W3 = blk
    Xa, z1, a1, z2, a2 = cache
    dW1 = dout.T @ a2
    dz2 = (dout @ W1) * (z2 > 0)
    dW2 = dz2.T @ a1
    dz1 = (dz2 @ W2) * (z1 > 0)
    dW3 = dz1.T @ Xa
    dX = (dz1 @ W3)[:, :-1]
    return (dW1, dW2, dW3), dX


def _normalize_backward(g, idx):
    out = g.copy()
    np.put_along_axis(out, idx[..., None], np.take_along_axis(out, idx[..., None], -1) - g.sum(-1, keepdims=True), -1)
    return out


def _add(grads, key, parts):
    if key in grads:
        grads[key] = tuple(a + b for a, b in zip(grads[key], parts))
    else:
        grads[key] = parts


def _ranked_backward(weights, direction, layer, caches, gout, grads, need_input=True):
    """Backprop ``gout`` (n, d_l, S) through the rank blocks of ``layer``."""
    topo = weights.topology
    m = topo.m[layer]
    n = gout.shape[0]
    gin = None
    for r in range(m):
        chunk = gout[:, r::m]
        parts, dX = _block_backward(weights.block(direction, layer, r), caches[r], chunk.reshape(-1, weights.S))
        _add(grads, (direction, layer, r), parts)
        if need_input:
            if gin is None:
                gin = np.empty((n, gout.shape[1], dX.shape[1]))
            gin[:, r::m] = dX.reshape(n, chunk.shape[1], -1)
    return gin


def _softmax_backward(p, gp):
    return p * (gp - (p * gp).sum(-1, keepdims=True))


def gradient(weights: NetWeights, batch: Batch, sigma2: float = 1.0):
    """``(risk, grad)``: the empirical risk and its exact gradient, shaped like ``weights``."""
    if len(batch) == 0:
        raise ConfigurationError("empty batch")
    weights = _dense(weights)
    topo, n = weights.topology, len(batch)
    grads = {}
    if weights.kind == CONVNET:
        _, c = convnet_forward(weights, batch.inputs, return_cache=True)
        p = c["p"]
        onehot = np.eye(weights.S)[np.asarray(batch.targets, int) - 1]
        risk = float(((onehot - p) ** 2).sum(-1).mean())
        gh = _softmax_backward(p, -2 * (onehot - p) / n)[:, None, :]
        for l in range(1, topo.L + 1):
            gpool = _normalize_backward(gh, c["argmax"][l - 1])
            gq = gpool[:, topo.parent_index(l)]
            gh = _ranked_backward(weights, "down", l, c["blocks"][l], gq, grads, need_input=l < topo.L)
    elif weights.kind == UNET:
        _, c = unet_forward(weights, batch.inputs, sigma2, return_cache=True)
        x = np.asarray(batch.targets, float)
        d = topo.d
        mean = c["mean"]
        risk = float(((x - mean) ** 2).mean())
        gm = -2 * (x - mean) / (n * d)
        states = np.arange(1, weights.S + 1, dtype=float)
        gb = [None] * (topo.L + 1)
        gh = [np.zeros_like(a) for a in c["h"]]
        gq = [None] + [np.zeros_like(c["q"][l]) for l in range(1, topo.L + 1)]
        gb[topo.L] = _softmax_backward(c["P"], gm[..., None] * states)
        for l in range(topo.L, 0, -1):
            gh[l] += gb[l]  # long skip connection
            gc = _ranked_backward(weights, "up", l, c["up_blocks"][l], gb[l], grads)
            gdiff = _normalize_backward(gc, c["up_argmax"][l])
            gq[l] -= gdiff
            gparent = gdiff.reshape(n, topo.layer_sizes[l - 1], topo.m[l], weights.S).sum(axis=2)
            gb[l - 1] = gparent
        gh[0] += gb[0]
        for l in range(1, topo.L + 1):
            gq[l] += gh[l - 1][:, topo.parent_index(l)]
            ga = _ranked_backward(weights, "down", l, c["down_blocks"][l], gq[l], grads)
            gh[l] += _normalize_backward(ga, c["down_argmax"][l])
    else:
        raise ConfigurationError(f"unknown network kind {weights.kind!r}")
    grad = NetWeights(weights.kind, topo, weights.S, weights.D, grads)
    return risk, grad


@dataclass
class TrainConfig:
    task: str
    n: int
    step_size: float
    iterations: int
    B: float | None = None
    eval_n: int = 2000
    seed: int = 0
    sigma2: float = 1.0
    divergence_factor: float = 10.0
    eval_every: int = 0

    def __post_init__(self):
        if self.task not in ("classify", "denoise"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.n < 1 or self.eval_n < 1 or self.iterations < 0 or not self.step_size > 0:
            raise ConfigurationError("counts and step size must be positive")
        if self.B is not None and not self.B > 0:
            raise ConfigurationError("norm budget must be positive")


@dataclass
class FitLog:
    rows: list = field(default_factory=list)
    initial_risk: float = float("nan")
    final_risk: float = float("nan")
    best_iteration: int = 0
    early_stopped: bool = False

    def write_csv(self, path, wall_clock: bool = True):
        cols = ["iteration", "risk", "d2", "d2_stderr"] + (["wall_clock"] if wall_clock else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.rows:
                w.writerow([_fmt(row.get(c)) for c in cols])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def fit(params: GhmParams, config: TrainConfig, init: NetWeights, batch: Batch | None = None):
    """Projected gradient descent on the empirical risk.

    Returns the iterate with the lowest empirical risk seen (so the result
    never has higher risk than ``init``) and a `FitLog`.  ``early_stopped``
    is set when the last iterate was worse than the returned one.  Raises
    `DivergenceError` when the risk exceeds ``divergence_factor`` times the
    initial risk.
    """
    expected = CONVNET if config.task == "classify" else UNET
    if init.kind != expected:
        raise ConfigurationError(f"task {config.task} needs a {expected} network")
    if batch is None:
        batch = make_batch(params, config.task, config.n, seed=config.seed, sigma2=config.sigma2)
    w = _dense(init).copy()
    log = FitLog()
    t0 = time.perf_counter()
    best, best_risk = init, None
    d2_fn = d2_classify if config.task == "classify" else d2_denoise
    for it in range(config.iterations + 1):
        risk, grad = gradient(w, batch, config.sigma2) if it < config.iterations else (empirical_risk(w, batch, config.sigma2), None)
        if not np.isfinite(risk):
            raise NumericError(f"non-finite empirical risk at iteration {it}", step=it)
        if it == 0:
            log.initial_risk = risk
        row = {"iteration": it, "risk": risk, "wall_clock": time.perf_counter() - t0}
        if config.eval_every and (it % config.eval_every == 0 or it == config.iterations):
            est = d2_fn(w, params, config.eval_n, seed=config.seed + 1)
            row["d2"], row["d2_stderr"] = est.value, est.stderr
        log.rows.append(row)
        if risk > config.divergence_factor * log.initial_risk:
            raise DivergenceError(f"risk {risk:.4g} exceeded {config.divergence_factor}x the initial risk", log=log)
        if best_risk is None or risk < best_risk:
            best, best_risk, log.best_iteration = w, risk, it
        if grad is None:
            break
        w = w.zip_map(grad, lambda W, G: W - config.step_size * G)
        if config.B is not None:
            w = project_norms(w, config.B)
    log.final_risk = best_risk
    log.early_stopped = log.best_iteration != config.iterations
    if config.iterations == 0:
        return init, log
    return best, log


@dataclass(frozen=True)
class D2Estimate:
    value: float
    stderr: float
    exact: bool


def _as_fn(model, kind):
    if isinstance(model, NetWeights):
        if model.kind == CONVNET and kind == "classify":
            return lambda x: convnet_forward(model, x)
        if model.kind == UNET and kind == "denoise":
            return lambda z, s2=1.0: unet_forward(model, z, s2)
        raise ConfigurationError(f"a {model.kind} network cannot be scored on {kind}")
    return model


def d2_classify(model, params: GhmParams, eval_n: int = 10000, seed=None) -> D2Estimate:
    """``E_x sum_s (mu(s|x) - mu*(s|x))^2`` with the Bayes classifier from BP.

    Exact (weighted by the leaf marginal) when ``S^d`` is at most
    ``EXACT_D2_LIMIT``; otherwise a Monte Carlo mean over ``eval_n`` draws.
    """
    fn = _as_fn(model, "classify")
    S, d = params.S, params.topology.d
    if S**d <= EXACT_D2_LIMIT:
        X = np.array(list(itertools.product(range(1, S + 1), repeat=d)), dtype=float)
        w = np.exp(mp.log_evidence(params, X))
        # impossible configurations carry no weight and have no posterior
        X, w = X[w > 0], w[w > 0]
        dev = ((np.asarray(fn(X)) - bp.bp_classify(params, X)) ** 2).sum(-1)
        return D2Estimate(float(w @ dev), 0.0, True)
    x = sample(params, np.random.default_rng(seed), size=eval_n).x.astype(float)
    dev = ((np.asarray(fn(x)) - bp.bp_classify(params, x)) ** 2).sum(-1)
    return D2Estimate(float(dev.mean()), float(dev.std(ddof=1) / np.sqrt(eval_n)), False)


def d2_denoise(model, params: GhmParams, eval_n: int = 10000, seed=None, sigma2: float = 1.0) -> D2Estimate:
    """Monte Carlo ``E_z d^-1 ||m(z) - m*(z)||^2`` with the Bayes denoiser from BP."""
    fn = _as_fn(model, "denoise")
    rng = np.random.default_rng(seed)
    x = sample(params, rng, size=eval_n).x
    z = corrupt(x, np.sqrt(sigma2), rng)
    ref = bp.bp_denoise(params, z, sigma2)[1]
    dev = ((np.asarray(fn(z, sigma2)) - ref) ** 2).mean(-1)
    return D2Estimate(float(dev.mean()), float(dev.std(ddof=1) / np.sqrt(eval_n)), False)
