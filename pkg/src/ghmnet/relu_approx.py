"""Piecewise-linear ReLU approximants and the two-hidden-layer blocks built from them.

Scalar pieces:

* ``exp_delta`` on ``(-inf, 0]``: interpolates ``exp`` at the points where
  it takes the equally spaced values ``e_j = j / (M - 1)``, constant
  ``e_1`` to the left of the first knot and exactly 1 at 0.
* ``log_delta`` on ``[1/A, A]``: interpolates ``log`` at points whose log
  values are equally spaced (a geometric grid), constant to the left.
* ``Ind(x) = 2 ReLU(x - 1/2) + 2 ReLU(x + 1/2) - 4 ReLU(x)``, the integer
  indicator ``1{x = 0}``.

Blocks compute ``W1 ReLU(W2 ReLU(W3 [h; 1]))``.  The middle matrix of a
block is a product of three thin factors; it is kept factored
(`FactoredMatrix`) because its dense form is enormous at useful accuracies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParamsError

_CHUNK = 4096


def relu(x):
    return np.maximum(x, 0.0)


@dataclass(frozen=True, eq=False)
class PiecewiseReluFn:
    """``x -> sum_j a_j ReLU(w_j x + b_j)``.

    ``knots``/``values`` are the interpolation nodes of the construction and
    ``bounds`` the coefficient limits it promises (keys ``a``, ``w``, ``b``).
    """

    a: np.ndarray
    w: np.ndarray
    b: np.ndarray
    knots: np.ndarray
    values: np.ndarray
    bounds: dict = field(default_factory=dict)
    name: str = ""

    @property
    def M(self) -> int:
        return len(self.a)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1)
        out = np.empty_like(flat)
        for s in range(0, flat.size, _CHUNK):
            seg = flat[s : s + _CHUNK]
            out[s : s + _CHUNK] = relu(np.multiply.outer(seg, self.w) + self.b) @ self.a
        return out.reshape(x.shape)

    def within_bounds(self) -> bool:
        checks = {"a": self.a, "w": self.w, "b": self.b}
        return all(np.abs(checks[k]).max() <= lim * (1 + 1e-12) for k, lim in self.bounds.items())


def _hinge_expansion(xs, ys):
    """Slopes of consecutive chords and their increments (the hinge weights)."""
    slopes = np.diff(ys) / np.diff(xs)
    return slopes, np.diff(slopes, prepend=0.0)


def build_exp_approx(delta: float) -> PiecewiseReluFn:
    """ReLU interpolant of ``exp`` with sup error at most ``delta`` on ``(-inf, 0]``.

    Knots ``t_j = log(e_j)`` with ``e_j = j / (M - 1)``, ``M = ceil(1/delta) + 1``.
    The function is written as ``1 - sum_j c_j ReLU(t_j - x)``: the constant
    is the unit ``2 ReLU(1/2)`` and every hinge vanishes at ``x = 0`` because
    ``t_j <= 0``, so ``exp_delta(0) = 1`` holds exactly in floating point.
    Left of ``t_1`` the value is the constant ``e_1``.  ``M`` units in total.
    """
    if not delta > 0:
        raise InvalidParamsError(f"delta must be positive, got {delta}")
    M = math.ceil(1 / delta) + 1
    e = np.arange(1, M) / (M - 1)  # e_1 .. e_{M-1} = 1
    knots = np.log(e)
    knots[-1] = 0.0
    if M > 2:
        slopes = np.diff(e) / np.diff(knots)  # s_1 .. s_{M-2}
        hinge = np.diff(slopes, prepend=0.0)  # coefficient of ReLU(t_j - x), j < M-1
        a = np.concatenate([[2.0], hinge, [-slopes[-1]]])
        w = np.concatenate([[0.0], -np.ones(M - 1)])
        b = np.concatenate([[0.5], knots[:-1], [0.0]])
    else:
        a, w, b = np.array([2.0, 0.0]), np.array([0.0, -1.0]), np.array([0.5, 0.0])
    return PiecewiseReluFn(
        a, w, b, knots, e, bounds={"a": 2.0, "w": 1.0, "b": math.log(M)}, name=f"exp[{delta:g}]"
    )


def build_log_approx(A: float, delta: float, n_units: int | None = None) -> PiecewiseReluFn:
    """ReLU interpolant of ``log`` on ``[1/A, A]``.

    The default ``M = ceil(2A/delta) + 1`` units place ``M - 1`` segments whose
    log values are evenly spaced, so the interpolation error is at most
    ``2 log(A) / (M - 1) <= delta log(A) / A``.  ``n_units`` overrides ``M``
    when a caller has its own accounting (the error is then verified by the
    caller, not assumed).  One unit is the constant ``-log(A) * ReLU(1)``.
    """
    if not A > 1:
        raise InvalidParamsError(f"A must exceed 1, got {A}")
    if not delta > 0:
        raise InvalidParamsError(f"delta must be positive, got {delta}")
    M = math.ceil(2 * A / delta) + 1 if n_units is None else int(n_units)
    if M < 2:
        raise InvalidParamsError("need at least two units")
    logs = np.linspace(-math.log(A), math.log(A), M)
    knots = np.exp(logs)
    knots[0], knots[-1] = 1 / A, A
    _, hinge = _hinge_expansion(knots, logs)
    a = np.concatenate([[-math.log(A)], hinge])
    w = np.concatenate([[0.0], np.ones(M - 1)])
    b = np.concatenate([[1.0], -knots[:-1]])
    return PiecewiseReluFn(a, w, b, knots, logs, bounds={"a": 2 * A, "w": 1.0, "b": A}, name=f"log[{A:g},{delta:g}]")


def build_indicator() -> PiecewiseReluFn:
    """``Ind``: 1 at 0, 0 at every other integer, a hat of half-width 1/2."""
    return PiecewiseReluFn(
        np.array([2.0, 2.0, -4.0]),
        np.ones(3),
        np.array([-0.5, 0.5, 0.0]),
        knots=np.array([-0.5, 0.0, 0.5]),
        values=np.array([0.0, 1.0, 0.0]),
        bounds={"a": 4.0, "w": 1.0, "b": 1.0},
        name="ind",
    )


class FactoredMatrix:
    """Product ``F[0] @ F[1] @ ... @ F[-1]`` kept as its factors."""

    def __init__(self, factors):
        self.factors = [np.asarray(f, dtype=float) for f in factors]
        for left, right in zip(self.factors, self.factors[1:]):
            if left.shape[1] != right.shape[0]:
                raise ValueError("factor shapes do not chain")

    @property
    def shape(self):
        return (self.factors[0].shape[0], self.factors[-1].shape[1])

    def apply(self, X):
        """Rows of ``X`` times the transpose: ``X @ M.T``."""
        for f in reversed(self.factors):
            X = X @ f.T
        return X

    def matvec(self, v):
        for f in reversed(self.factors):
            v = f @ v
        return v

    def rmatvec(self, v):
        for f in self.factors:
            v = f.T @ v
        return v

    def toarray(self):
        out = self.factors[0]
        for f in self.factors[1:]:
            out = out @ f
        return out

    def max_abs(self) -> float:
        """Largest entry in absolute value, computed in row blocks."""
        left = self.factors[0]
        right = self.factors[1]
        for f in self.factors[2:]:
            right = right @ f
        best = 0.0
        for s in range(0, left.shape[0], 256):
            best = max(best, float(np.abs(left[s : s + 256] @ right).max()))
        return best


def op_norm(W) -> float:
    """Spectral norm of a dense or factored matrix."""
    if isinstance(W, FactoredMatrix):
        rows, cols = W.shape
        if rows * cols <= 4_000_000:
            return float(np.linalg.norm(W.toarray(), 2))
        from scipy.sparse.linalg import LinearOperator, svds

        lo = LinearOperator(W.shape, matvec=W.matvec, rmatvec=W.rmatvec, dtype=float)
        return float(svds(lo, k=1, return_singular_vectors=False, random_state=0)[0])
    W = np.asarray(W, dtype=float)
    if W.size == 0:
        return 0.0
    return float(np.linalg.norm(W, 2))


def as_dense(W) -> np.ndarray:
    return W.toarray() if isinstance(W, FactoredMatrix) else np.asarray(W, dtype=float)


@dataclass(eq=False)
class TwoLayerBlock:
    """``h -> W1 ReLU(W2 ReLU(W3 [h; 1]))``.

    ``kind`` is ``"lse"`` (input a normalized S-vector) or ``"leaf"`` (input a
    state symbol).  ``exp_fn``/``log_fn``/``table`` record the scalar
    ingredients so `reference` can recompute the same function by scalar
    composition.  ``out_bias`` is a constant added to every output, realized
    by an extra always-on unit in the second hidden layer.
    """

    W1: np.ndarray
    W2: object
    W3: np.ndarray
    kind: str
    table: np.ndarray
    log_fn: PiecewiseReluFn
    inner_fn: PiecewiseReluFn
    delta: float
    K: float
    out_bias: np.ndarray | None = None

    @property
    def S(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_widths(self) -> tuple:
        return (self.W3.shape[0], self.W1.shape[1])

    def __call__(self, h, check_domain: bool = False):
        h = np.asarray(h, dtype=float)
        if self.kind == "leaf":
            h = h.reshape(-1, 1)
        if check_domain and self.kind == "lse" and np.abs(h.max(axis=-1)).max() > 1e-9:
            raise ValueError("block input must have maximum exactly 0")
        n = h.shape[0]
        out = np.empty((n, self.S))
        W2 = self.W2
        step = max(1, 2_000_000 // max(self.W3.shape[0], 1))
        for s in range(0, n, step):
            x = np.concatenate([h[s : s + step], np.ones((min(step, n - s), 1))], axis=1)
            z1 = relu(x @ self.W3.T)
            z2 = relu(W2.apply(z1) if isinstance(W2, FactoredMatrix) else z1 @ W2.T)
            out[s : s + step] = z2 @ self.W1.T
        return out

    def reference(self, h):
        """Same function evaluated as scalar compositions (no weight matrices)."""
        h = np.asarray(h, dtype=float)
        if self.kind == "leaf":
            x = h.reshape(-1)
            states = np.arange(1, self.S + 1)
            inner = self.inner_fn(x[:, None] - states[None, :])
        else:
            inner = self.inner_fn(h)
        out = self.log_fn(inner @ self.table.T)
        if self.out_bias is not None:
            out = out + self.out_bias
        return out

    def max_entries(self) -> dict:
        W2 = self.W2
        w2 = W2.max_abs() if isinstance(W2, FactoredMatrix) else float(np.abs(W2).max())
        return {"W1": float(np.abs(self.W1).max()), "W2": w2, "W3": float(np.abs(self.W3).max())}


def _check_table(psi, K):
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise InvalidParamsError(f"expected a square table, got shape {psi.shape}")
    if not K > 1 or psi.min() < (1 - 1e-12) / K or psi.max() > K:
        raise InvalidParamsError(f"table entries must lie in [1/K, K] with K={K}")
    return psi


def _assemble(inner_fn, log_fn, table, in_cols, const_col, in_scale, out_bias):
    """Shared weight layout.

    First hidden layer: ``inner_fn`` applied to each input coordinate
    (``S`` groups of ``len(inner_fn.a)`` units) plus one always-on unit.
    Second: ``log_fn`` applied to each of the ``S`` mixtures ``table @ inner``.
    """
    S = table.shape[0]
    M2, M1 = inner_fn.M, log_fn.M
    n_in = in_cols
    W3 = np.zeros((S * M2 + 1, n_in + 1))
    Wbar = np.zeros((S + 1, S * M2 + 1))
    for j in range(S):
        rows = slice(j * M2, (j + 1) * M2)
        W3[rows, const_col(j)] = inner_fn.w * in_scale
        W3[rows, -1] = inner_fn.b[j] * in_scale if inner_fn.b.ndim == 2 else inner_fn.b * in_scale
        Wbar[j, rows] = inner_fn.a / in_scale
    W3[-1, -1] = 1.0
    Wbar[-1, -1] = 1.0
    mix = np.eye(S + 1)
    mix[:S, :S] = table
    extra = 0 if out_bias is None else 1
    Wtil = np.zeros((S * M1 + extra, S + 1))
    W1 = np.zeros((S, S * M1 + extra))
    for i in range(S):
        rows = slice(i * M1, (i + 1) * M1)
        Wtil[rows, i] = log_fn.w
        Wtil[rows, -1] = log_fn.b
        W1[i, rows] = log_fn.a
    if out_bias is not None:
        Wtil[-1, -1] = 1.0
        W1[:, -1] = out_bias
    return W1, FactoredMatrix([Wtil, mix, Wbar]), W3


def lse_sizes(S: int, K: float, delta: float) -> tuple[int, int]:
    """``(M1, M2)``: unit counts of the log and exp pieces of an LSE block."""
    return math.ceil(2 * S * K / delta) + 1, math.ceil(2 * S * K * K / delta) + 1


def build_lse_block(
    psi,
    direction: str,
    K: float,
    delta: float,
    out_bias=None,
    table=None,
) -> TwoLayerBlock:
    """Block within ``delta`` of ``h -> log(Psi exp(h))`` on vectors with max 0.

    ``direction="down"`` uses ``Psi = psi`` (parent from child),
    ``"up"`` uses ``Psi = psi.T``.  The exp piece is accurate to
    ``delta / (2 S K^2)`` and the log piece to ``delta / 2`` on
    ``[1/(SK), SK]``.  ``table`` replaces ``Psi`` outright (validated by
    the caller) for blocks that fold extra factors into the mixture.
    """
    if direction not in ("down", "up"):
        raise InvalidParamsError(f"direction must be 'down' or 'up', got {direction!r}")
    psi = _check_table(psi, K)
    S = psi.shape[0]
    Psi = (psi if direction == "down" else psi.T) if table is None else np.asarray(table, float)
    M1, M2 = lse_sizes(S, K, delta)
    exp_fn = build_exp_approx(delta / (2 * S * K * K))
    assert exp_fn.M == M2
    log_fn = build_log_approx(S * K, delta / 2, n_units=M1)
    bias = None if out_bias is None else np.broadcast_to(np.asarray(out_bias, float), (S,)).copy()
    W1, W2, W3 = _assemble(exp_fn, log_fn, Psi, S, lambda j: j, 1.0, bias)
    return TwoLayerBlock(W1, W2, W3, "lse", Psi, log_fn, exp_fn, delta, K, bias)


class _ShiftedIndicator:
    """Unit coefficients of ``Ind(x - j)`` for ``j = 1..S``, as one piece per state."""

    def __init__(self, S):
        ind = build_indicator()
        self.a, self.w = ind.a, ind.w
        self.b = np.stack([ind.b - j for j in range(1, S + 1)])  # (S, 3)
        self.M = 3
        self._ind = ind

    def __call__(self, shifted):
        return self._ind(shifted)


def leaf_sizes(K: float, delta: float) -> tuple[int, int]:
    return math.ceil(K / delta) + 1, 3


def build_leaf_block(psi, K: float, delta: float, out_bias=None) -> TwoLayerBlock:
    """Block mapping a symbol ``x in [S]`` to within ``delta`` of ``(log psi(i, x))_i``.

    Input is ``[x; 1]``.  The indicator units ``Ind(x - j)`` have shifts up
    to ``S + 1/2``; their ``W3`` rows are scaled by ``1/(S + 1/2)`` (and the
    next layer by the reciprocal) so every ``W3`` entry is at most 1.  The log
    piece uses ``ceil(K/delta) + 1`` units on ``[1/K, K]``.
    """
    psi = _check_table(psi, K)
    S = psi.shape[0]
    M1, _ = leaf_sizes(K, delta)
    log_fn = build_log_approx(K, delta, n_units=M1)
    ind = _ShiftedIndicator(S)
    bias = None if out_bias is None else np.broadcast_to(np.asarray(out_bias, float), (S,)).copy()
    scale = 1.0 / (S + 0.5)
    W1, W2, W3 = _assemble(ind, log_fn, psi, 1, lambda j: 0, scale, bias)
    return TwoLayerBlock(W1, W2, W3, "leaf", psi, log_fn, ind._ind, delta, K, bias)
