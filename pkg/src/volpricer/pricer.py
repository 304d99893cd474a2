"""Monte Carlo valuation of payoff(terminal functional) over simulated noise.

The value at (t, omega) is the expectation of phi applied to the terminal
functional of omega plus the maturity-capped noise J.  A pricing context
precomputes everything reusable: weight blocks restricted to the support
window, grid-consistent variance curves and smoothing covariances (so the
discrete model is exactly self-consistent), trapezoid weights and quadrature
rules.  Batches stream through a deterministic pairwise reduction, so results
are bitwise independent of the worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gaussian import (GridError, PathSample, TimeGrid, apply_weights,
                       discrete_variance_curve, full_weight_tensor,
                       normal_stream, psd_factor, smoothing_covariances,
                       tree_reduce, _draw_normals, STREAM_PRICER)
from .kernels import KernelSpec
from .payoffs import Payoff
from .terminal import (SmoothedVolConfig, _smoothed, snap_support,
                       support_trapezoid)
from .volmodel import MatrixCurve, VolModel

_SQRT_FLOOR = 1e-12


@dataclass
class PricingConfig:
    """Monte Carlo controls: sample count, seed, reduction and quadrature."""

    M: int = 100_000
    seed: int = 0
    antithetic: bool = False
    workers: int = 1
    batch_size: int = 8192
    gh_order: int = 32
    inner_mc: int = 4096
    steps_per_year: int = 500

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.antithetic and self.M % 2:
            raise ValueError("antithetic sampling requires an even M")
        if self.workers < 1 or self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("workers >= 1 and even batch_size >= 2 required")


@dataclass
class PriceEstimate:
    """Monte Carlo mean with standard error and 95% interval."""

    mean: float
    std_error: float
    M: int
    seed: int
    ci95: tuple = field(default=None)

    def __post_init__(self):
        if self.ci95 is None:
            half = 1.96 * self.std_error
            self.ci95 = (self.mean - half, self.mean + half)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "M": self.M,
                "seed": self.seed, "ci95": list(self.ci95)}


def moments_of(sample: np.ndarray) -> tuple:
    """(count, mean, sum of squared deviations) of a 1-d sample.

    Deviations are taken around the first value before averaging, so constant
    samples yield an exactly zero second moment (degenerate-kernel pricing
    must report a zero standard error, not rounding dust).
    """
    n = sample.size
    shift = float(sample.flat[0])
    d = sample - shift
    dbar = float(np.mean(d))
    mean = shift + dbar
    m2 = float(np.sum((d - dbar) ** 2))
    return n, mean, m2


def merge_moments(a: tuple, b: tuple) -> tuple:
    """Pairwise merge of (count, mean, M2) partials; exact for constant samples."""
    na, ma, m2a = a
    nb, mb, m2b = b
    n = na + nb
    delta = mb - ma
    mean = ma + delta * nb / n
    m2 = m2a + m2b + delta * delta * na * nb / n
    return n, mean, m2


def estimate_from_moments(mom: tuple, seed: int,
                          n_paths: Optional[int] = None) -> PriceEstimate:
    n, mean, m2 = mom
    se = math.sqrt(m2 / (n - 1) / n) if n > 1 else 0.0
    return PriceEstimate(mean, se, n_paths if n_paths is not None else n, seed)


class PricingContext:
    """Precomputed state for valuing one (t, grid, payoff, model, kernel) problem.

    The model's variance curve defaults to the grid-consistent discrete curve
    implied by the weight tensor, and the smoothing covariances are the
    discrete ones, so conditional expectations match the law of the simulated
    noise exactly.
    """

    def __init__(self, t, grid: TimeGrid, payoff: Payoff, model: VolModel,
                 spec: KernelSpec, cfg: PricingConfig):
        if "T" not in grid.markers:
            raise GridError("grid must carry a maturity marker 'T'")
        self.grid = grid
        self.payoff = payoff
        self.spec = spec
        self.cfg = cfg
        self.it = grid.index_of(t)
        self.iT = grid.markers["T"]
        if self.it > self.iT:
            raise GridError("pricing time must not exceed the maturity")
        W = full_weight_tensor(spec, grid)
        if model.variance_curve is None:
            vcurve = MatrixCurve(grid.nodes, discrete_variance_curve(spec, grid))
            model = model.with_variance_curve(vcurve)
        self.model = model
        self.ia, self.ib = snap_support(grid, model.support)
        self.sup = np.arange(self.ia, self.ib + 1)
        self.n_sup = self.sup.size
        self.trapw = support_trapezoid(grid, self.ia, self.ib)[self.sup]
        self.n_act = grid.n_cells - self.it
        self.sqrt_dr = np.sqrt(grid.spacings[self.it:])
        WJ = W[self.sup][:, self.it:].copy()
        local_T_cells = self.iT - self.it
        beyond = self.sup > self.iT
        if np.any(beyond):
            WJ[beyond, local_T_cells:] = 0.0
        self.WJ = WJ
        self.WI = W[self.sup][:, self.it:]
        sig = smoothing_covariances(spec, grid, self.iT)
        cache = {}
        for i in self.sup:
            if i >= self.iT:
                cache[int(i)] = (sig[i], psd_factor(sig[i]))
        self.svcfg = SmoothedVolConfig(gh_order=cfg.gh_order, inner_mc=cfg.inner_mc,
                                       inner_seed=cfg.seed, sigma_cache=cache)
        self.floor = _SQRT_FLOOR if payoff.needs_positive else 0.0
        self._L = {int(i): cache[int(i)][1] for i in cache}

    # -- per-batch building blocks ----------------------------------------

    def draw(self, seed: int, stream: int, batch: int, count: int) -> np.ndarray:
        """Standard normals (count, n_act, m) for this context's active cells."""
        return _draw_normals(seed, stream, batch, count, self.n_act,
                             self.spec.m, self.cfg.antithetic)

    def theta_from_normals(self, omega_sup: np.ndarray, Z: np.ndarray,
                           weights: Optional[np.ndarray] = None) -> np.ndarray:
        dW = Z * self.sqrt_dr[None, :Z.shape[1], None]
        Wt = self.WJ if weights is None else weights
        return omega_sup[None, :, :] + apply_weights(dW, Wt)

    def node_values(self, kind: str, theta: np.ndarray) -> np.ndarray:
        """f / grad / hess of the terminal-functional integrand along theta.

        Conditioned form: raw model derivatives before the maturity node,
        Gaussian-smoothed ones after (the gradient of the terminal functional).
        """
        nodes = self.grid.nodes
        outs = []
        for loc, i in enumerate(self.sup):
            s = nodes[i]
            x = theta[:, loc, :]
            if i <= self.iT:
                fn = {"f": self.model.f, "grad": self.model.grad,
                      "hess": self.model.hess}[kind]
                outs.append(fn(s, x))
            else:
                outs.append(_smoothed(self.model, kind, s, x,
                                      self._L[int(i)], self.svcfg))
        return np.stack(outs, axis=1)

    def node_values_raw(self, kind: str, what: np.ndarray) -> np.ndarray:
        """Raw model derivatives along a full-noise state path (no smoothing)."""
        nodes = self.grid.nodes
        fn = {"f": self.model.f, "grad": self.model.grad,
              "hess": self.model.hess}[kind]
        outs = [fn(nodes[i], what[:, loc, :]) for loc, i in enumerate(self.sup)]
        return np.stack(outs, axis=1)

    def terminal_values(self, theta: np.ndarray) -> np.ndarray:
        """Terminal functional per path: trapezoid of the integrand over support."""
        vals = self.node_values("f", theta)
        if self.floor > 0.0:
            vals = np.maximum(vals, self.floor)
        return vals @ self.trapw

    def support_slice(self, path: PathSample) -> np.ndarray:
        if len(path.grid) != len(self.grid):
            raise GridError("path not defined on the pricing grid")
        return path.values[self.sup]

    def pair_reduce(self, per_path: np.ndarray) -> np.ndarray:
        """Collapse antithetic pairs to their means (identity when plain MC)."""
        if not self.cfg.antithetic:
            return per_path
        half = per_path.shape[0] // 2
        return 0.5 * (per_path[:half] + per_path[half:])


def batch_layout(M: int, batch_size: int):
    counts = []
    done = 0
    while done < M:
        take = min(batch_size, M - done)
        counts.append(take)
        done += take
    return counts


def run_batches(cfg: PricingConfig, M: int, per_batch: Callable,
                combine=None) -> tuple:
    """Map batches to partial tuples and tree-reduce them deterministically."""
    counts = batch_layout(M, cfg.batch_size)
    if combine is None:
        combine = lambda a, b: tuple(x + y for x, y in zip(a, b))
    if cfg.workers == 1:
        parts = [per_batch(b, c) for b, c in enumerate(counts)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(per_batch, range(len(counts)), counts))
    return tree_reduce(parts, combine)


def price(t, omega: PathSample, payoff: Payoff, model: VolModel,
          spec: KernelSpec, cfg: PricingConfig,
          grid: Optional[TimeGrid] = None) -> PriceEstimate:
    """Value functional at (t, omega): mean of phi(terminal(omega + J)).

    ``omega`` is the state path on the pricing grid (its grid must carry the
    maturity marker).  At t == T the noise vanishes and the estimate equals
    the terminal condition with zero standard error.
    """
    grid = omega.grid if grid is None else grid
    ctx = PricingContext(t, grid, payoff, model, spec, cfg)
    return price_with_context(ctx, omega, cfg.M, cfg.seed)


def price_with_context(ctx: PricingContext, omega: PathSample, M: int,
                       seed: int) -> PriceEstimate:
    omega_sup = ctx.support_slice(omega)

    def per_batch(b: int, count: int):
        Z = ctx.draw(seed, STREAM_PRICER, b, count)
        theta = ctx.theta_from_normals(omega_sup, Z)
        V = ctx.terminal_values(theta)
        p = ctx.pair_reduce(ctx.payoff.value(V))
        return moments_of(p)

    mom = run_batches(ctx.cfg, M, per_batch, combine=merge_moments)
    return estimate_from_moments(mom, seed, n_paths=M)


def price_at_state(t, history: PathSample, theta: PathSample, payoff: Payoff,
                   model: VolModel, spec: KernelSpec,
                   cfg: PricingConfig) -> PriceEstimate:
    """Value at t for an explicit (realized history, forward curve) state pair.

    The segments must share the node at t; the concatenated path is priced as
    usual.  For supports past the maturity the history never enters.
    """
    omega = history.concat_at(t, theta)
    return price(t, omega, payoff, model, spec, cfg)


def make_pricing_grid(maturity, horizon, steps_per_year: int,
                      include=()) -> TimeGrid:
    """Grid with the maturity marker set, extra times inserted exactly."""
    return TimeGrid.build(maturity, horizon, steps_per_year, include=include)
