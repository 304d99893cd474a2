"""Simulation of the conditional Gaussian decomposition on a time grid.

The driving objects are the post-t noise I^t_s = int_t^s K(s,r) dW_r and its
maturity-capped variant J_s = int_t^{min(s,T)} K(s,r) dW_r, built from shared
Brownian cell increments through a precomputed weight tensor.  Grid nodes are
stored as exact rationals (integer numerators over one denominator) so that
lag-based quantities are bitwise shift-invariant for convolution kernels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

import numpy as np

from .kernels import (KernelSpec, QuadratureError, covariance_entry,
                      lag_integral, lag_square_integral)

_MAX_DEN = 1 << 52  # keep numerators exactly representable as floats


class GridError(ValueError):
    """Malformed time grid or off-grid time request."""


class FactorizationError(RuntimeError):
    """Covariance factorization failed after jitter escalation."""


def _to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (tuple, list)) and len(x) == 2:
        return Fraction(int(x[0]), int(x[1]))
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(float(x))


class TimeGrid:
    """Strictly increasing node times with exact rational representation.

    Nodes are ``numerators / den`` with shared integer denominator ``den``;
    spacings and lags are computed from integer differences so two grids with
    identical integer structure produce bitwise-identical weights.
    """

    def __init__(self, numerators, den: int, markers: Optional[dict] = None):
        self.num = np.asarray(numerators, dtype=np.int64)
        self.den = int(den)
        if self.num.ndim != 1 or self.num.size < 2:
            raise GridError("grid needs at least two nodes")
        if np.any(np.diff(self.num) <= 0):
            raise GridError("grid nodes must be strictly increasing")
        if self.num[0] != 0:
            raise GridError("grid must start at 0")
        self.nodes = self.num / float(self.den)
        self.spacings = (self.num[1:] - self.num[:-1]) / float(self.den)
        self.markers = dict(markers or {})

    def __len__(self):
        return self.num.size

    @property
    def n_cells(self) -> int:
        return self.num.size - 1

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    def lag(self, i: int, k: int) -> float:
        """Exact-rational lag nodes[i] - nodes[k] as one correctly rounded division."""
        return float(self.num[i] - self.num[k]) / float(self.den)

    def index_of(self, x, tol: float = 1e-12) -> int:
        fx = _to_fraction(x)
        target = fx * self.den
        if target.denominator == 1:
            i = int(np.searchsorted(self.num, int(target)))
            if i < self.num.size and self.num[i] == int(target):
                return i
        xf = float(fx)
        i = int(np.argmin(np.abs(self.nodes - xf)))
        if abs(self.nodes[i] - xf) <= tol * max(1.0, abs(xf)):
            return i
        raise GridError(f"time {xf} is not a grid node")

    def cache_key(self):
        return (self.num.tobytes(), self.den)

    def shifted(self, t) -> "TimeGrid":
        """Sub-grid from node t re-based to start at 0 (exact integer shift)."""
        it = self.index_of(t)
        num = self.num[it:] - self.num[it]
        markers = {k: v - it for k, v in self.markers.items() if v >= it}
        return TimeGrid(num, self.den, markers)

    @staticmethod
    def build(maturity, horizon, steps_per_year: int,
              include: Iterable = ()) -> "TimeGrid":
        """Uniform grid segments [0, T] and [T, horizon], extra nodes inserted.

        Each segment uses ceil(length * steps_per_year) uniform cells so that
        the maturity T sits exactly on a node; ``include`` times (pricing time
        t, PPDE bump times, ...) are inserted exactly.
        """
        T = _to_fraction(maturity)
        hor = _to_fraction(horizon)
        if not (0 < T <= hor):
            raise GridError("need 0 < maturity <= horizon")
        fracs = set()
        for seg_a, seg_b in ((Fraction(0), T), (T, hor)):
            if seg_b == seg_a:
                continue
            n = max(1, math.ceil(float(seg_b - seg_a) * steps_per_year))
            step = (seg_b - seg_a) / n
            for k in range(n + 1):
                fracs.add(seg_a + k * step)
        for x in include:
            fx = _to_fraction(x)
            if not (0 <= fx <= hor):
                raise GridError("include times must lie within [0, horizon]")
            fracs.add(fx)
        ordered = sorted(fracs)
        den = 1
        for f in ordered:
            den = den * f.denominator // math.gcd(den, f.denominator)
        if den > _MAX_DEN:
            raise GridError("grid times require too large a common denominator; "
                            "pass times as simple fractions")
        num = np.array([int(f * den) for f in ordered], dtype=np.int64)
        grid = TimeGrid(num, den)
        grid.markers["T"] = grid.index_of(T)
        return grid


@dataclass
class PathSample:
    """Path values on a grid, one row per node, d columns."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != len(self.grid):
            raise GridError("one value row per grid node required")
        if not np.all(np.isfinite(self.values)):
            raise GridError("path values must be finite")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @staticmethod
    def zeros(grid: TimeGrid, d: int = 1) -> "PathSample":
        return PathSample(grid, np.zeros((len(grid), d)))

    @staticmethod
    def constant(grid: TimeGrid, vec) -> "PathSample":
        v = np.atleast_1d(np.asarray(vec, dtype=float))
        return PathSample(grid, np.tile(v, (len(grid), 1)))

    @staticmethod
    def from_function(grid: TimeGrid, fn, d: int = 1) -> "PathSample":
        vals = np.stack([np.atleast_1d(fn(s)) for s in grid.nodes])
        return PathSample(grid, vals)

    def concat_at(self, t, tail: "PathSample") -> "PathSample":
        """Path equal to self before t and to ``tail`` from t onward."""
        it = self.grid.index_of(t)
        if len(tail.grid) == len(self.grid):
            tail_vals = tail.values[it:]
        elif len(tail.grid) == len(self.grid) - it:
            tail_vals = tail.values
        else:
            raise GridError("tail segment does not align with the grid at t")
        out = self.values.copy()
        out[it:] = tail_vals
        return PathSample(self.grid, out)


# ---------------------------------------------------------------------------
# counter-based RNG streams
# ---------------------------------------------------------------------------

STREAM_PRICER = 1
STREAM_OUTER = 2
STREAM_INNER_SMOOTH = 3
STREAM_EXACT = 4

_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF


def normal_stream(seed: int, stream: int, batch: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, batch).

    Philox is a keyed counter cipher: equal keys reproduce the exact draw
    sequence regardless of which worker consumes them.
    """
    key = np.array([seed & _U64, ((stream & _U32) << 32) | (batch & _U32)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def tree_reduce(parts: list, combine):
    """Deterministic pairwise reduction, independent of worker scheduling."""
    if not parts:
        raise ValueError("nothing to reduce")
    level = list(parts)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level) - 1, 2):
            nxt.append(combine(level[i], level[i + 1]))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


# ---------------------------------------------------------------------------
# weight tensor
# ---------------------------------------------------------------------------

_WEIGHT_CACHE: dict = {}
_WEIGHT_CACHE_MAX = 8


def full_weight_tensor(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Lower-triangular cell weights W[i, k] in R^{d x m}.

    W[i, k] multiplies the Brownian increment of cell [r_k, r_{k+1}] in the
    discretization of int K(s_i, r) dW_r.  Off-diagonal cells carry the exact
    cell average; for singular kernels the cell adjacent to the node carries
    the variance-matched magnitude sqrt(int_cell |K|^2 / dr) so simulated
    marginal variances track the exact ones even for small H.
    """
    key = (spec.cache_key(), grid.cache_key())
    hit = _WEIGHT_CACHE.get(key)
    if hit is not None:
        return hit
    n = len(grid)
    W = np.zeros((n, grid.n_cells, spec.d, spec.m))
    entries = spec.scalar_entries()
    singular = [[e.is_singular for e in row] for row in entries]
    for i in range(1, n):
        for k in range(i):
            lo = grid.lag(i, k + 1)
            hi = grid.lag(i, k)
            dr = grid.spacings[k]
            avg = lag_integral(spec, lo, hi) / dr
            if k == i - 1 and spec.is_singular:
                sq = lag_square_integral(spec, lo, hi)
                for a in range(spec.d):
                    for b in range(spec.m):
                        if singular[a][b]:
                            mag = math.sqrt(sq[a, b] / dr)
                            avg[a, b] = math.copysign(mag, avg[a, b]) if avg[a, b] != 0.0 else 0.0
                W[i, k] = avg
            else:
                W[i, k] = avg
    if len(_WEIGHT_CACHE) >= _WEIGHT_CACHE_MAX:
        _WEIGHT_CACHE.clear()
    _WEIGHT_CACHE[key] = W
    return W


def build_weights(spec: KernelSpec, grid: TimeGrid, t, T) -> np.ndarray:
    """Weight tensor for I^t: rows are nodes, columns are cells of [t, horizon].

    weight[i, k] vanishes for cells outside [t, s_i]; within a cell the
    increment is multiplied by the (exact) cell integral over its length.
    """
    it = grid.index_of(t)
    grid.index_of(T)  # validates T on grid
    W = full_weight_tensor(spec, grid).copy()
    W[:, :it] = 0.0
    return W


def discrete_variance_curve(spec: KernelSpec, grid: TimeGrid) -> np.ndarray:
    """Grid-consistent state variance Var(int_0^{s_i} K(s_i,r) dW_r), (n, d, d).

    This is the quadrature of int_0^s K K^T implied by the weight tensor, i.e.
    the variance of the simulated state; it converges to the exact integral
    under grid refinement and keeps the discrete model exactly self-consistent.
    """
    W = full_weight_tensor(spec, grid)
    n = len(grid)
    out = np.zeros((n, spec.d, spec.d))
    dr = grid.spacings
    for i in range(1, n):
        rows = W[i, :i]
        out[i] = np.einsum("kde,kce,k->dc", rows, rows, dr[:i])
    return out


def smoothing_covariances(spec: KernelSpec, grid: TimeGrid, iT: int) -> np.ndarray:
    """Grid-consistent Var(int_T^{s_i} K(s_i,r) dW_r) for nodes i >= iT, (n, d, d)."""
    W = full_weight_tensor(spec, grid)
    n = len(grid)
    out = np.zeros((n, spec.d, spec.d))
    dr = grid.spacings
    for i in range(iT + 1, n):
        rows = W[i, iT:i]
        out[i] = np.einsum("kde,kce,k->dc", rows, rows, dr[iT:i])
    return out


def psd_factor(mat: np.ndarray, jitter0: float = 1e-12, jitter_max: float = 1e-8):
    """Symmetric PSD factor L with L L^T = mat, escalating diagonal jitter."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    scale = max(float(np.max(np.abs(np.diag(mat)))), 0.0)
    if scale == 0.0:
        return np.zeros_like(mat)
    jit = jitter0
    while jit <= jitter_max:
        try:
            return np.linalg.cholesky(mat + jit * scale * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError:
            jit *= 10.0
    # last resort: eigenvalue clip (still a valid PSD factor when near-PSD)
    w, v = np.linalg.eigh(mat)
    if np.min(w) < -1e-6 * scale:
        raise FactorizationError("covariance matrix is not positive semidefinite")
    return v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass
class GaussianBatch:
    """M sampled paths of the post-t noise pair (I^t, J^{t,T}) on the grid.

    ``j_paths`` rows before the maturity node equal ``i_paths`` rows exactly;
    beyond it they are built from increments on [t, T] only.  Both families
    come from the same Brownian increments when ``shared_increments`` is set.
    """

    grid: TimeGrid
    t_index: int
    T_index: int
    M: int
    seed: int
    i_paths: np.ndarray
    j_paths: np.ndarray
    shared_increments: bool = True


def apply_weights(dW: np.ndarray, W_rows: np.ndarray) -> np.ndarray:
    """Accumulate weighted increments: (M, cells, m) x (nodes, cells, d, m) -> (M, nodes, d).

    Routed through one dense matmul so the hot loop runs in BLAS.
    """
    M, K, e = dW.shape
    n, K2, d, e2 = W_rows.shape
    A = dW.reshape(M, K * e)
    B = W_rows.transpose(1, 3, 0, 2).reshape(K * e, n * d)
    return (A @ B).reshape(M, n, d)


def simulate(spec: KernelSpec, grid: TimeGrid, t, T, M: int, seed: int,
             batch_size: int = 8192, antithetic: bool = False) -> GaussianBatch:
    """Sample (I^t, J^{t,T}) pathwise from shared increments on cells of [t, horizon]."""
    if M < 1:
        raise ValueError("M must be >= 1")
    it = grid.index_of(t)
    iT = grid.index_of(T)
    W = full_weight_tensor(spec, grid)
    n = len(grid)
    act = slice(it, grid.n_cells)
    n_act = grid.n_cells - it
    sqrt_dr = np.sqrt(grid.spacings[act])
    I = np.zeros((M, n, spec.d))
    J = np.zeros((M, n, spec.d))
    WI = W[:, act]
    WJ = WI.copy()
    WJ[iT + 1:, max(iT - it, 0):] = 0.0
    done = 0
    b = 0
    while done < M:
        take = min(batch_size, M - done)
        Z = _draw_normals(seed, STREAM_PRICER, b, take, n_act, spec.m, antithetic)
        dW = Z * sqrt_dr[None, :, None]
        I[done:done + take] = apply_weights(dW, WI)
        J[done:done + take, :iT + 1] = I[done:done + take, :iT + 1]
        if iT + 1 < n:
            J[done:done + take, iT + 1:] = apply_weights(dW, WJ[iT + 1:])
        done += take
        b += 1
    return GaussianBatch(grid, it, iT, M, seed, I, J, True)


def _draw_normals(seed: int, stream: int, batch: int, count: int, n_cells: int,
                  m: int, antithetic: bool) -> np.ndarray:
    gen = normal_stream(seed, stream, batch)
    if not antithetic:
        return gen.standard_normal((count, n_cells, m))
    if count % 2:
        raise ValueError("antithetic sampling requires an even path count")
    half = gen.standard_normal((count // 2, n_cells, m))
    return np.concatenate([half, -half], axis=0)


def simulate_exact(spec: KernelSpec, grid: TimeGrid, t, T, M: int,
                   seed: int) -> GaussianBatch:
    """Exact-covariance sampler for (I^t, J^{t,T}); distributional oracle.

    Assembles the covariance of the stacked node values through the exact
    kernel integrals (quadrature where no antiderivative exists), factorizes
    with diagonal jitter escalation and draws correlated Gaussian vectors.
    """
    it = grid.index_of(t)
    iT = grid.index_of(T)
    n = len(grid)
    nodes = grid.nodes
    t_f = nodes[it]
    T_f = nodes[iT]
    # stacked rows: I at every node past t, plus distinct J rows past T
    rows = [(i, nodes[i]) for i in range(it + 1, n)]
    rows += [(i, min(nodes[i], T_f)) for i in range(iT + 1, n)]
    nI = n - it - 1
    dim = len(rows) * spec.d
    cov = np.zeros((dim, dim))
    for a, (ia, ua) in enumerate(rows):
        for bidx, (ib, ub) in enumerate(rows[a:], start=a):
            hi = min(ua, ub)
            if hi <= t_f:
                block = np.zeros((spec.d, spec.d))
            else:
                block = covariance_entry(spec, nodes[ia], nodes[ib], t_f, hi)
            cov[a * spec.d:(a + 1) * spec.d, bidx * spec.d:(bidx + 1) * spec.d] = block
            if bidx != a:
                cov[bidx * spec.d:(bidx + 1) * spec.d, a * spec.d:(a + 1) * spec.d] = block.T
    L = psd_factor(cov)
    gen = normal_stream(seed, STREAM_EXACT, 0)
    Z = gen.standard_normal((M, dim))
    X = Z @ L.T
    I = np.zeros((M, n, spec.d))
    J = np.zeros((M, n, spec.d))
    for a, (ia, ua) in enumerate(rows[:nI]):
        I[:, ia] = X[:, a * spec.d:(a + 1) * spec.d]
    J[:, :iT + 1] = I[:, :iT + 1]
    for a, (ia, ua) in enumerate(rows[nI:], start=nI):
        J[:, rows[a][0]] = X[:, a * spec.d:(a + 1) * spec.d]
    return GaussianBatch(grid, it, iT, M, seed, I, J, True)


def theta_path(spec: KernelSpec, grid: TimeGrid, t, gamma: PathSample,
               increments: np.ndarray) -> PathSample:
    """Conditional-mean path gamma_s + int_0^t K(s, r) dW_r on the full grid.

    ``increments`` are the Brownian cell increments of [0, t], shape
    (cells_before_t, m).  Rows at s <= t reproduce the realized state path;
    rows beyond t give its conditional expectation.
    """
    it = grid.index_of(t)
    increments = np.asarray(increments, dtype=float)
    if increments.ndim == 1:
        increments = increments[:, None]
    if increments.shape != (it, spec.m):
        raise GridError(f"increments must have shape ({it}, {spec.m})")
    if gamma.values.shape[1] != spec.d:
        raise GridError("gamma dimension does not match the kernel")
    W = full_weight_tensor(spec, grid)
    vals = gamma.values.copy()
    if it > 0:
        vals += apply_weights(increments[None, :, :], W[:, :it])[0]
    return PathSample(grid, vals)


def dump_batch(batch: GaussianBatch, path: str) -> None:
    """Little-endian float64 dump: int64 header (M, nodes, d), then I, then J."""
    with open(path, "wb") as fh:
        header = np.array([batch.M, len(batch.grid), batch.i_paths.shape[2]],
                          dtype="<i8")
        fh.write(header.tobytes())
        fh.write(batch.i_paths.astype("<f8").tobytes())
        fh.write(batch.j_paths.astype("<f8").tobytes())
