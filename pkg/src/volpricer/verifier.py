"""Numerical verification of the engine's structural properties.

Checks: the heat-type path PDE satisfied by the value functional (time
difference against the second derivative in the kernel directions), the
martingale property of the priced process along simulated states, exact time
invariance for convolution kernels, and finite-difference agreement of the
pathwise derivative estimators.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .gaussian import (PathSample, TimeGrid, apply_weights,
                       discrete_variance_curve, full_weight_tensor,
                       normal_stream, STREAM_OUTER, STREAM_PRICER)
from .greeks import Direction, ResolvedDirection, pair_hess
from .kernels import KernelSpec
from .payoffs import Payoff
from .pricer import (PriceEstimate, PricingConfig, PricingContext,
                     estimate_from_moments, merge_moments, moments_of, price,
                     price_with_context, run_batches)
from .volmodel import Curve, MatrixCurve, VolModel

STREAM_INNER_MC = 5


class VerificationError(RuntimeError):
    """A verification routine could not be run as requested."""


def ppde_residual(t, omega: PathSample, payoff: Payoff, model: VolModel,
                  spec: KernelSpec, eps_t, delta: float,
                  cfg: PricingConfig) -> dict:
    """Residual of the pricing PDE at (t, omega) with common random numbers.

    residual = [u(t + eps, omega) - u(t, omega)] / eps
               + 1/2 * <second derivative, (truncated columns)^2>,
    with every term estimated on the same increment array (the later start
    simply drops the first cells).  Reported with both the truncated-column
    and the singular-column second derivative, each with a 95% interval.
    """
    if not payoff.is_smooth:
        raise VerificationError("PDE residual needs a smooth payoff; "
                                "use the smoothed call variants")
    grid = omega.grid
    it = grid.index_of(t)
    t_eps = grid.nodes[it] + float(eps_t)
    ite = grid.index_of(t_eps, tol=1e-9)
    eps = grid.nodes[ite] - grid.nodes[it]
    ctx_t = PricingContext(t, grid, payoff, model, spec, cfg)
    ctx_e = PricingContext(grid.nodes[ite], grid, payoff, model, spec, cfg)
    off = ite - it
    r_tr = ResolvedDirection(ctx_t, t, Direction("truncated", delta=delta))
    r_sg = ResolvedDirection(ctx_t, t, Direction("singular"))
    omega_sup = ctx_t.support_slice(omega)
    W0 = ctx_t.WJ[:, :off]  # weights of the cells dropped at t + eps
    zero_sup = np.zeros_like(omega_sup)

    def stats(b, count):
        Z = ctx_t.draw(cfg.seed, STREAM_PRICER, b, count)
        theta_e = ctx_e.theta_from_normals(omega_sup, Z[:, off:])
        # price at t, antithetic in the dropped cells: cancels their
        # first-order contribution pathwise, the dominant 1/sqrt(eps) noise
        dtheta = ctx_t.theta_from_normals(zero_sup, Z[:, :off], weights=W0)
        theta_p = theta_e + dtheta
        theta_m = theta_e - dtheta
        V_e = ctx_e.terminal_values(theta_e)
        V_p = ctx_t.terminal_values(theta_p)
        V_m = ctx_t.terminal_values(theta_m)
        price_t = 0.5 * (ctx_t.payoff.value(V_p) + ctx_t.payoff.value(V_m))
        diff = (ctx_e.payoff.value(V_e) - price_t) / eps
        d1p, d1m = ctx_t.payoff.d1(V_p), ctx_t.payoff.d1(V_m)
        d2p, d2m = ctx_t.payoff.d2(V_p), ctx_t.payoff.d2(V_m)
        Gp = ctx_t.node_values("grad", theta_p)
        Gm = ctx_t.node_values("grad", theta_m)
        Hp = ctx_t.node_values("hess", theta_p)
        Hm = ctx_t.node_values("hess", theta_m)
        out = []
        for r in (r_tr, r_sg):
            Ap, Am = r.pair_grad(Gp), r.pair_grad(Gm)
            Bp, Bm = pair_hess(Hp, r, r), pair_hess(Hm, r, r)
            sec_p = d2p * (Ap * Ap).sum(axis=1) + d1p * Bp.sum(axis=1)
            sec_m = d2m * (Am * Am).sum(axis=1) + d1m * Bm.sum(axis=1)
            sec = 0.5 * (sec_p + sec_m)
            out.append(moments_of(ctx_t.pair_reduce(diff + 0.5 * sec)))
        out.append(moments_of(ctx_t.pair_reduce(price_t)))
        return tuple(out)

    moms = run_batches(cfg, cfg.M, stats,
                       combine=lambda a, b: tuple(merge_moments(x, y)
                                                  for x, y in zip(a, b)))
    res_tr = estimate_from_moments(moms[0], cfg.seed, n_paths=cfg.M)
    res_sg = estimate_from_moments(moms[1], cfg.seed, n_paths=cfg.M)
    pr = estimate_from_moments(moms[2], cfg.seed, n_paths=cfg.M)
    rel = abs(res_tr.mean) / abs(pr.mean) if pr.mean != 0.0 else math.inf
    return {
        "check": "ppde",
        "t": float(grid.nodes[it]), "eps_t": float(eps), "delta": float(delta),
        "price": pr.mean,
        "residual": res_tr.mean, "ci": list(res_tr.ci95),
        "residual_singular": res_sg.mean, "ci_singular": list(res_sg.ci95),
        "relative_residual": rel,
        "ci_contains_zero": res_tr.ci95[0] <= 0.0 <= res_tr.ci95[1],
        "pass": bool(rel <= 0.01 and res_tr.ci95[0] <= 0.0 <= res_tr.ci95[1]),
    }


def martingale_check(times: Sequence, payoff: Payoff, model: VolModel,
                     spec: KernelSpec, M_outer: int, M_inner: int, seed: int,
                     grid: TimeGrid, gamma: Optional[PathSample] = None,
                     cfg: Optional[PricingConfig] = None) -> dict:
    """Tower-property test: the average of inner prices along simulated states
    must match the time-0 price within three combined standard errors.

    The statistic is linear in the inner estimates, so it carries no nested
    bias for any payoff; the identity payoff additionally makes each inner
    estimate itself unbiased pathwise.
    """
    cfg = cfg or PricingConfig(M=max(2, M_outer * M_inner), seed=seed)
    gamma = gamma or PathSample.zeros(grid, spec.d)
    u0 = price(0, gamma, payoff, model, spec,
               PricingConfig(M=max(2, M_outer * M_inner), seed=seed,
                             batch_size=cfg.batch_size, gh_order=cfg.gh_order,
                             workers=cfg.workers))
    W = full_weight_tensor(spec, grid)
    results = []
    overall = True
    for si, s in enumerate(times):
        isx = grid.index_of(s)
        gen = normal_stream(seed, STREAM_OUTER, si)
        Zo = gen.standard_normal((M_outer, isx, spec.m))
        dWo = Zo * np.sqrt(grid.spacings[:isx])[None, :, None]
        theta_hat = gamma.values[None, :, :] + apply_weights(dWo, W[:, :isx])
        ctx = PricingContext(grid.nodes[isx], grid, payoff, model, spec, cfg)
        xs = np.empty(M_outer)
        for o in range(M_outer):
            Z = normal_stream(seed, STREAM_INNER_MC, si * M_outer + o) \
                .standard_normal((M_inner, ctx.n_act, spec.m))
            theta = ctx.theta_from_normals(theta_hat[o][ctx.sup], Z)
            xs[o] = float(np.mean(ctx.payoff.value(ctx.terminal_values(theta))))
        mean_s = float(np.mean(xs))
        se_s = float(np.std(xs, ddof=1) / math.sqrt(M_outer))
        comb = math.sqrt(se_s ** 2 + u0.std_error ** 2)
        gap = abs(mean_s - u0.mean)
        ok = bool(gap <= 3.0 * comb) if comb > 0 else bool(gap == 0.0)
        overall = overall and ok
        results.append({"s": float(grid.nodes[isx]), "mean": mean_s,
                        "se": se_s, "gap": gap, "combined_se": comb,
                        "pass": ok})
    return {"check": "martingale", "u0": u0.mean, "u0_se": u0.std_error,
            "M_outer": M_outer, "M_inner": M_inner, "times": results,
            "pass": overall}


def shifted_problem(t, omega: PathSample, model: VolModel, spec: KernelSpec):
    """Exact time-shifted problem data for convolution kernels.

    Returns (grid, omega, model) describing the same option seen from time t
    as a time-0 problem: the grid is re-based by an integer shift, the state
    path is sliced, and the model carries the shifted initial-variance and
    state-variance curves (tabulated at the shifted nodes with the original
    node values, which are exact knot lookups).
    """
    if not spec.is_convolution:
        raise VerificationError("time invariance requires a convolution kernel")
    grid = omega.grid
    it = grid.index_of(t)
    g2 = grid.shifted(t)
    om2 = PathSample(g2, omega.values[it:])
    nodes_a = grid.nodes[it:]
    zeta_vals = np.atleast_1d(model.zeta(nodes_a))
    zeta2 = Curve(g2.nodes, zeta_vals)
    vcurve = model.variance_curve
    if vcurve is None:
        vcurve = MatrixCurve(grid.nodes, discrete_variance_curve(spec, grid))
    vmats = np.stack([np.atleast_2d(vcurve(s)) for s in nodes_a])
    v2 = MatrixCurve(g2.nodes, vmats)
    a_f, b_f = model.support
    t_f = grid.nodes[it]
    model2 = model.with_variance_curve(v2).with_support(
        (max(a_f - t_f, 0.0), b_f - t_f))
    model2.zeta = zeta2
    return g2, om2, model2


def time_invariance_check(t, omega: PathSample, payoff: Payoff,
                          model: VolModel, spec: KernelSpec,
                          cfg: PricingConfig) -> dict:
    """Convolution-kernel invariance: pricing at t equals pricing the shifted
    problem at 0, bitwise, under the seed-aligned increment mapping.

    Both sides draw the same standard normals because the active-cell layout
    after the shift is identical; the integer-based grid makes every lag,
    spacing and weight bitwise equal.  Supports that begin before t would add
    a frozen history integral with a different summation order, so only
    forward-window (VIX-type) supports are certified bitwise.
    """
    if not spec.is_convolution:
        raise VerificationError("time invariance requires a convolution kernel")
    grid = omega.grid
    it = grid.index_of(t)
    ia, _ = PricingContext(t, grid, payoff, model, spec, cfg).ia, None
    if grid.nodes[ia] < grid.nodes[it] - 1e-14:
        raise VerificationError(
            "support starts before t; the frozen history term breaks the "
            "bitwise form of the invariance check")
    g2, om2, model2 = shifted_problem(t, omega, model, spec)
    p1 = price(t, omega, payoff, model, spec, cfg)
    p2 = price(0, om2, payoff, model2, spec, cfg)
    # cross-check that the shifted weights are the original block
    W1 = full_weight_tensor(spec, grid)[it:, it:]
    W2 = full_weight_tensor(spec, g2)
    wdiff = float(np.max(np.abs(W1 - W2))) if W1.size else 0.0
    bitwise = (p1.mean == p2.mean and p1.std_error == p2.std_error)
    return {"check": "time-invariance", "t": float(grid.nodes[it]),
            "price_t": p1.mean, "price_shifted": p2.mean,
            "difference": p1.mean - p2.mean, "weights_block_max_diff": wdiff,
            "bitwise_equal": bool(bitwise), "pass": bool(bitwise)}


def fd_derivative_check(t, omega: PathSample, eta: Direction, payoff: Payoff,
                        model: VolModel, spec: KernelSpec, cfg: PricingConfig,
                        eps_ladder: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4),
                        ) -> dict:
    """Gateaux consistency of the derivative estimators under common random
    numbers: difference quotients along eta against the pathwise estimators,
    over a ladder of bump sizes, with the one-sided error's slope in eps.
    """
    from .greeks import first_derivative, second_derivative

    grid = omega.grid
    ctx = PricingContext(t, grid, payoff, model, spec, cfg)
    r = ResolvedDirection(ctx, t, eta)
    if r.ncol != 1 and eta.kind != "explicit":
        raise VerificationError("fd check needs a single-column direction")
    eta_full = np.zeros((len(grid), spec.d))
    eta_full[ctx.sup] = r.eta[:, :, 0]
    d1 = first_derivative(t, omega, eta, payoff, model, spec, cfg)
    d2 = second_derivative(t, omega, eta, eta, payoff, model, spec, cfg)
    rows = []
    for eps in eps_ladder:
        om_p = PathSample(grid, omega.values + eps * eta_full)
        om_m = PathSample(grid, omega.values - eps * eta_full)
        pp = price(t, om_p, payoff, model, spec, cfg)
        p0 = price(t, omega, payoff, model, spec, cfg)
        pm = price(t, om_m, payoff, model, spec, cfg)
        fd1c = (pp.mean - pm.mean) / (2 * eps)
        fd1o = (pp.mean - p0.mean) / eps
        fd2 = (pp.mean - 2 * p0.mean + pm.mean) / eps ** 2
        rows.append({"eps": eps,
                     "fd_first_central": fd1c, "fd_first_one_sided": fd1o,
                     "fd_second": fd2,
                     "rel_err_first": abs(fd1c - d1.mean) / max(abs(d1.mean), 1e-300),
                     "rel_err_second": abs(fd2 - d2.mean) / max(abs(d2.mean), 1e-300),
                     "one_sided_err": abs(fd1o - d1.mean)})
    errs = np.array([rw["one_sided_err"] for rw in rows])
    eps_arr = np.array([rw["eps"] for rw in rows])
    ok_fit = np.all(errs > 0)
    slope = float(np.polyfit(np.log(eps_arr), np.log(np.maximum(errs, 1e-300)), 1)[0]) \
        if ok_fit else float("nan")
    finest = rows[-1]
    passed = bool(finest["rel_err_first"] <= 0.02 and finest["rel_err_second"] <= 0.02)
    return {"check": "fd", "first_derivative": d1.mean, "second_derivative": d2.mean,
            "ladder": rows, "one_sided_slope": slope, "pass": passed}


def delta_extrapolation_check(t, omega: PathSample, payoff: Payoff,
                              model: VolModel, spec: KernelSpec,
                              cfg: PricingConfig,
                              deltas: Sequence[float] = (0.1, 0.05, 0.025),
                              ) -> dict:
    """Truncation-limit consistency of the singular-direction derivatives.

    The gap between the singular estimator and the truncated one must shrink
    as delta decreases (same seed throughout).
    """
    from .greeks import first_derivative, singular_first

    sing = singular_first(t, omega, payoff, model, spec, cfg)
    sing_total = sum(e.mean for e in sing)
    gaps = []
    for dlt in deltas:
        tr = first_derivative(t, omega, Direction("truncated", delta=dlt),
                              payoff, model, spec, cfg)
        gaps.append(abs(tr.mean - sing_total))
    decreasing = all(gaps[i + 1] <= gaps[i] + 1e-15 for i in range(len(gaps) - 1))
    return {"check": "delta-extrapolation", "singular": sing_total,
            "deltas": list(deltas), "gaps": gaps, "pass": bool(decreasing)}
