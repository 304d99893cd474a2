"""Pathwise first and second derivatives of the value functional.

Directions are explicit continuous paths, truncated kernel columns (bounded
by construction) or the raw singular kernel columns, the latter defined as
truncation limits.  Estimators pair the payoff derivatives with the gradient
and Hessian of the terminal functional along the simulated state, built from
the same increments as the price (shared-increment batches).

Pairings are precomputed as per-node weight tensors: smooth directions use
plain trapezoid weights; for singular columns the cell adjacent to the anchor
carries the exact integral of the column (respectively of its squared
magnitude for the Hessian term), which keeps the integrable singularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gaussian import PathSample, STREAM_PRICER
from .kernels import (KernelSpec, evaluate, evaluate_truncated, lag_integral,
                      lag_product_integral)
from .payoffs import Payoff
from .pricer import (PriceEstimate, PricingConfig, PricingContext,
                     estimate_from_moments, merge_moments, moments_of,
                     run_batches)
from .volmodel import VolModel


class DirectionError(ValueError):
    """Invalid derivative direction."""


@dataclass
class Direction:
    """Perturbation direction on [t, horizon].

    kind ``explicit``: a continuous path (PathSample; zero before t implied).
    kind ``truncated``: column(s) of the delta-truncated kernel anchored at t.
    kind ``singular``: column(s) of the raw kernel anchored at t.
    ``column=None`` selects all driving columns (trace/gradient semantics);
    ``support`` optionally restricts the pairing window.
    """

    kind: str
    path: Optional[PathSample] = None
    delta: float = 0.05
    column: Optional[int] = None
    support: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("explicit", "truncated", "singular"):
            raise DirectionError(f"unknown direction kind {self.kind!r}")
        if self.kind == "explicit" and self.path is None:
            raise DirectionError("explicit direction needs a path")
        if self.kind == "truncated" and self.delta <= 0.0:
            raise DirectionError("truncated direction needs delta > 0")


class ResolvedDirection:
    """Direction values and pairing weights on the support nodes.

    ``pw1[n, d, c]`` pairs with gradients; ``pw2[n, d, d, c]`` with Hessians
    (only used for singular x singular pairs, where the anchor cell needs the
    exact squared-column integrals).
    """

    def __init__(self, ctx: PricingContext, t, direction: Direction):
        grid = ctx.grid
        it = grid.index_of(t)
        nodes = grid.nodes
        mask = np.ones(ctx.n_sup)
        if direction.support is not None:
            a, b = float(direction.support[0]), float(direction.support[1])
            sn = nodes[ctx.sup]
            mask = ((sn >= a - 1e-14) & (sn <= b + 1e-14)).astype(float)
        if direction.kind == "explicit":
            pth = direction.path
            if len(pth.grid) != len(grid):
                raise DirectionError("explicit direction must live on the pricing grid")
            eta = pth.values[ctx.sup][:, :, None].copy()
            eta[nodes[ctx.sup] < nodes[it] - 1e-14] = 0.0
            cols = [None]
        else:
            cols = list(range(ctx.spec.m)) if direction.column is None \
                else [direction.column]
            eta = np.zeros((ctx.n_sup, ctx.spec.d, len(cols)))
            t_f = nodes[it]
            for loc, i in enumerate(ctx.sup):
                s = nodes[i]
                if s < t_f or (direction.kind == "singular" and i == it):
                    continue
                if direction.kind == "truncated":
                    kmat = evaluate_truncated(ctx.spec, direction.delta, s, t_f)
                else:
                    kmat = evaluate(ctx.spec, s, t_f)
                for jloc, j in enumerate(cols):
                    eta[loc, :, jloc] = kmat[:, j]
        self.eta = eta
        self.ncol = eta.shape[2]
        tw = ctx.trapw * mask
        self.pw1 = eta * tw[:, None, None]
        self.pw2 = np.einsum("ndc,nec->ndec", eta, eta) * tw[:, None, None, None]
        if direction.kind == "singular" and it in ctx.sup and it < ctx.sup[-1]:
            loc0 = int(np.where(ctx.sup == it)[0][0])
            dr0 = grid.spacings[it]
            colint = lag_integral(ctx.spec, 0.0, dr0)          # (d, m)
            prodint = lag_product_integral(ctx.spec, 0.0, dr0)  # (d, d, m)
            self.pw1[loc0] = 0.0
            self.pw2[loc0] = 0.0
            w_next = tw[loc0 + 1]
            for jloc, j in enumerate(cols):
                self.pw1[loc0 + 1, :, jloc] = (eta[loc0 + 1, :, jloc]
                                               * (w_next - 0.5 * dr0)
                                               + colint[:, j] * mask[loc0 + 1])
                self.pw2[loc0 + 1, :, :, jloc] = (
                    np.outer(eta[loc0 + 1, :, jloc], eta[loc0 + 1, :, jloc])
                    * (w_next - 0.5 * dr0)
                    + prodint[:, :, j] * mask[loc0 + 1])

    def pair_grad(self, G: np.ndarray) -> np.ndarray:
        """<gradient, direction> per path and column: (b, n, d) -> (b, c)."""
        return np.einsum("bnd,ndc->bc", G, self.pw1, optimize=True)


def pair_hess(H: np.ndarray, r1: "ResolvedDirection",
              r2: "ResolvedDirection") -> np.ndarray:
    """Symmetrized Hessian pairing per path and column.

    A shared resolved direction contracts against its ``pw2`` tensor, whose
    anchor cell holds the exact squared-column integrals; distinct directions
    use the symmetrized gradient-weight form, so swapping the arguments is a
    bitwise no-op.
    """
    if r1 is r2:
        return np.einsum("bnde,ndec->bc", H, r1.pw2, optimize=True)
    a = np.einsum("bnde,ndc,nec->bc", H, r1.pw1, r2.eta, optimize=True)
    b = np.einsum("bnde,ndc,nec->bc", H, r2.pw1, r1.eta, optimize=True)
    return 0.5 * (a + b)


def _derivative_run(ctx: PricingContext, t, omega: PathSample, seed: int,
                    M: int, per_path) -> PriceEstimate:
    omega_sup = ctx.support_slice(omega)

    def stats(b, count):
        Z = ctx.draw(seed, STREAM_PRICER, b, count)
        theta = ctx.theta_from_normals(omega_sup, Z)
        val = ctx.pair_reduce(per_path(Z, theta))
        return moments_of(val)

    mom = run_batches(ctx.cfg, M, stats, combine=merge_moments)
    return estimate_from_moments(mom, seed, n_paths=M)


def first_derivative(t, omega: PathSample, eta: Direction, payoff: Payoff,
                     model: VolModel, spec: KernelSpec, cfg: PricingConfig,
                     unconditioned: bool = False) -> PriceEstimate:
    """Directional derivative E[phi'(V) <terminal-functional gradient, eta>].

    Defaults to the conditioned estimator: the gradient of the terminal
    functional along omega + J (raw variance gradient before maturity,
    smoothed one after), which is the lower-variance form.  With
    ``unconditioned=True`` the raw variance gradient along the full-noise
    path omega + I is paired instead; both agree in expectation.
    """
    ctx = PricingContext(t, omega.grid, payoff, model, spec, cfg)
    r = ResolvedDirection(ctx, t, eta)

    def per_path(Z, theta):
        V = ctx.terminal_values(theta)
        d1 = ctx.payoff.d1(V)
        if unconditioned:
            what = ctx.theta_from_normals(ctx.support_slice(omega), Z,
                                          weights=ctx.WI)
            G = ctx.node_values_raw("grad", what)
        else:
            G = ctx.node_values("grad", theta)
        return d1 * r.pair_grad(G).sum(axis=1)

    return _derivative_run(ctx, t, omega, cfg.seed, cfg.M, per_path)


def second_derivative(t, omega: PathSample, eta: Direction, eta2: Direction,
                      payoff: Payoff, model: VolModel, spec: KernelSpec,
                      cfg: PricingConfig) -> PriceEstimate:
    """Second directional derivative <d2 u, (eta, eta2)>.

    Sum of the phi''(V) cross term, pairing the terminal-functional gradient
    with each direction, and the phi'(V) Hessian term; matrix directions
    contract column by column (trace convention).  Both terms ride on the
    same increments as the price.
    """
    ctx = PricingContext(t, omega.grid, payoff, model, spec, cfg)
    same = eta is eta2 or (eta.kind == eta2.kind and eta.kind != "explicit"
                           and eta.delta == eta2.delta
                           and eta.column == eta2.column
                           and eta.support == eta2.support)
    r1 = ResolvedDirection(ctx, t, eta)
    r2 = r1 if same else ResolvedDirection(ctx, t, eta2)
    if r1.ncol != r2.ncol:
        raise DirectionError("direction pair must expose the same column count")

    def per_path(Z, theta):
        V = ctx.terminal_values(theta)
        d1 = ctx.payoff.d1(V)
        d2 = ctx.payoff.d2(V)
        G = ctx.node_values("grad", theta)
        A1 = r1.pair_grad(G)
        A2 = r2.pair_grad(G)
        H = ctx.node_values("hess", theta)
        B = pair_hess(H, r1, r2)
        return d2 * (A1 * A2).sum(axis=1) + d1 * B.sum(axis=1)

    return _derivative_run(ctx, t, omega, cfg.seed, cfg.M, per_path)


def singular_first(t, omega: PathSample, payoff: Payoff, model: VolModel,
                   spec: KernelSpec, cfg: PricingConfig,
                   column: Optional[int] = None) -> list:
    """First derivative in the raw kernel column(s), one estimate per column.

    Direct estimator with the singular column; the cell adjacent to t carries
    the exact column integral.  The verifier cross-checks this against the
    truncated directions as delta shrinks.
    """
    ctx = PricingContext(t, omega.grid, payoff, model, spec, cfg)
    r = ResolvedDirection(ctx, t, Direction("singular", column=column))
    omega_sup = ctx.support_slice(omega)

    def stats(b, count):
        Z = ctx.draw(cfg.seed, STREAM_PRICER, b, count)
        theta = ctx.theta_from_normals(omega_sup, Z)
        V = ctx.terminal_values(theta)
        d1 = ctx.payoff.d1(V)
        G = ctx.node_values("grad", theta)
        A = r.pair_grad(G)
        return tuple(moments_of(ctx.pair_reduce(d1 * A[:, j]))
                     for j in range(r.ncol))

    moms = run_batches(cfg, cfg.M, stats,
                       combine=lambda a, b: tuple(merge_moments(x, y)
                                                  for x, y in zip(a, b)))
    return [estimate_from_moments(m, cfg.seed, n_paths=cfg.M) for m in moms]


def singular_second(t, omega: PathSample, payoff: Payoff, model: VolModel,
                    spec: KernelSpec, cfg: PricingConfig) -> PriceEstimate:
    """Second derivative in the raw kernel columns, summed over columns.

    The Hessian integrand scales like the squared column near the anchor;
    its first cell carries the exact integrals of the pairwise column
    products, keeping the integrable singularity for every H > 0.
    """
    return second_derivative(t, omega, Direction("singular"),
                             Direction("singular"), payoff, model, spec, cfg)


def hedge_ratio(t, history: PathSample, theta: PathSample, payoff: Payoff,
                model: VolModel, spec: KernelSpec,
                cfg: PricingConfig) -> np.ndarray:
    """Martingale-representation integrand at the current state, per column."""
    omega = history.concat_at(t, theta)
    ests = singular_first(t, omega, payoff, model, spec, cfg)
    return np.array([e.mean for e in ests])
