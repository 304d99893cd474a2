"""Gaussian-smoothed variance and the terminal functional of the pricing PDE.

Past the maturity node the instantaneous variance enters prices only through
its conditional expectation against the independent post-maturity noise; that
Gaussian convolution is computed by tensor Gauss-Hermite quadrature (inner
Monte Carlo beyond three dimensions).  The terminal functional integrates raw
variance before maturity and smoothed variance after, over the model support.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gaussian import PathSample, TimeGrid, normal_stream, psd_factor, STREAM_INNER_SMOOTH
from .kernels import KernelSpec, covariance_entry
from .volmodel import VolModel


class FloorActivatedWarning(RuntimeWarning):
    """The positivity floor inside the terminal functional was triggered."""


@dataclass
class SmoothedVolConfig:
    """Quadrature settings and cached smoothing covariances.

    ``sigma_cache`` maps node index -> (Sigma_s, L_s) with L_s L_s^T = Sigma_s;
    when present it overrides the exact-integral covariance (the pricing
    context fills it with the grid-consistent discrete covariances so that
    smoothing matches the law of the simulated noise exactly).
    """

    gh_order: int = 32
    inner_mc: int = 4096
    inner_seed: int = 0
    sigma_cache: Optional[dict] = None

    def __post_init__(self):
        if self.gh_order < 2:
            raise ValueError("gh_order must be >= 2")
        if self.inner_mc < 2 or self.inner_mc % 2:
            raise ValueError("inner_mc must be even and >= 2")


_GH_CACHE: dict = {}


def gauss_hermite_points(d: int, order: int):
    """Standard-normal tensor quadrature: points (P, d) and weights (P,)."""
    key = (d, order)
    hit = _GH_CACHE.get(key)
    if hit is not None:
        return hit
    x, w = np.polynomial.hermite.hermgauss(order)
    pts1 = math.sqrt(2.0) * x
    w1 = w / math.sqrt(math.pi)
    grids = np.meshgrid(*([pts1] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(order ** d)
    for g in np.meshgrid(*([w1] * d), indexing="ij"):
        wts = wts * g.ravel()
    _GH_CACHE[key] = (pts, wts)
    return pts, wts


def _inner_points(d: int, cfg: SmoothedVolConfig):
    """Antithetic standard-normal cloud for d > 3, fixed sub-seed."""
    gen = normal_stream(cfg.inner_seed, STREAM_INNER_SMOOTH, d)
    half = gen.standard_normal((cfg.inner_mc // 2, d))
    pts = np.concatenate([half, -half], axis=0)
    wts = np.full(cfg.inner_mc, 1.0 / cfg.inner_mc)
    return pts, wts


def sigma_matrix(spec: KernelSpec, s: float, T: float) -> np.ndarray:
    """Exact smoothing covariance int_T^s K(s, r) K(s, r)^T dr, s >= T."""
    if s < T - 1e-14:
        raise ValueError("sigma_matrix requires s >= T")
    if s <= T:
        return np.zeros((spec.d, spec.d))
    return covariance_entry(spec, s, s, T, s)


def _factor_for(spec, s, T, cfg: SmoothedVolConfig, node_index: Optional[int]):
    if cfg is not None and cfg.sigma_cache is not None and node_index is not None:
        cached = cfg.sigma_cache.get(node_index)
        if cached is not None:
            return cached[1]
    sig = sigma_matrix(spec, s, T)
    return psd_factor(sig)


def _smoothed(model: VolModel, kind: str, s: float, theta: np.ndarray,
              L: np.ndarray, cfg: SmoothedVolConfig) -> np.ndarray:
    """Gaussian convolution of f / grad f / hess f at time s."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[None, :]
        squeeze = True
    else:
        squeeze = False
    d = theta.shape[-1]
    if np.max(np.abs(L)) == 0.0:
        fn = {"f": model.f, "grad": model.grad, "hess": model.hess}[kind]
        out = fn(s, theta)
        return out[0] if squeeze else out
    if d <= 3:
        pts, wts = gauss_hermite_points(d, cfg.gh_order if cfg else 32)
    else:
        pts, wts = _inner_points(d, cfg)
    shifts = pts @ L.T  # (P, d)
    x = theta[..., None, :] + shifts  # (..., P, d)
    if kind == "f":
        vals = model.f(s, x)
        out = np.tensordot(vals, wts, axes=([-1], [0]))
    elif kind == "grad":
        vals = model.grad(s, x)
        out = np.tensordot(np.moveaxis(vals, -1, 0), wts, axes=([-1], [0]))
        out = np.moveaxis(out, 0, -1)
    else:
        vals = model.hess(s, x)
        out = np.tensordot(np.moveaxis(vals, (-2, -1), (0, 1)), wts, axes=([-1], [0]))
        out = np.moveaxis(out, (0, 1), (-2, -1))
    return out[0] if squeeze else out


def smoothed_variance(model: VolModel, spec: KernelSpec, s: float, theta,
                      cfg: SmoothedVolConfig, T: Optional[float] = None,
                      node_index: Optional[int] = None) -> np.ndarray:
    """Conditional expected variance E[f_s(theta + G)], G ~ N(0, Sigma_s).

    ``T`` anchors the smoothing window when no cache entry exists; with a
    degenerate Sigma_s this reduces to f_s(theta).
    """
    if T is None and (cfg is None or cfg.sigma_cache is None or node_index is None):
        raise ValueError("either T or a sigma_cache entry is required")
    L = _factor_for(spec, s, T if T is not None else s, cfg, node_index)
    return _smoothed(model, "f", s, theta, L, cfg)


def smoothed_variance_grad(model: VolModel, spec: KernelSpec, s: float, theta,
                           cfg: SmoothedVolConfig, T: Optional[float] = None,
                           node_index: Optional[int] = None) -> np.ndarray:
    """Gradient of the smoothed variance (differentiation under the integral)."""
    L = _factor_for(spec, s, T if T is not None else s, cfg, node_index)
    return _smoothed(model, "grad", s, theta, L, cfg)


def smoothed_variance_hess(model: VolModel, spec: KernelSpec, s: float, theta,
                           cfg: SmoothedVolConfig, T: Optional[float] = None,
                           node_index: Optional[int] = None) -> np.ndarray:
    """Hessian of the smoothed variance."""
    L = _factor_for(spec, s, T if T is not None else s, cfg, node_index)
    return _smoothed(model, "hess", s, theta, L, cfg)


def support_trapezoid(grid: TimeGrid, lo_idx: int, hi_idx: int) -> np.ndarray:
    """Trapezoid node weights for the window [nodes[lo], nodes[hi]] (n,) array."""
    w = np.zeros(len(grid))
    if hi_idx <= lo_idx:
        return w
    dr = grid.spacings[lo_idx:hi_idx]
    w[lo_idx:hi_idx] += 0.5 * dr
    w[lo_idx + 1:hi_idx + 1] += 0.5 * dr
    return w


def snap_support(grid: TimeGrid, support) -> tuple:
    """Clamp the support window to the grid and snap endpoints to nodes."""
    a, b = support
    nodes = grid.nodes
    a = min(max(float(a), nodes[0]), nodes[-1])
    b = min(max(float(b), nodes[0]), nodes[-1])
    ia = int(np.argmin(np.abs(nodes - a)))
    ib = int(np.argmin(np.abs(nodes - b)))
    return ia, ib


def terminal_variance(model: VolModel, spec: KernelSpec, omega: PathSample,
                      T, cfg: SmoothedVolConfig, floor: float = 0.0) -> float:
    """Terminal functional: raw variance before T plus smoothed variance after.

    Trapezoid rule over grid nodes restricted to the model support; support
    endpoints are snapped to nodes.  A positive ``floor`` clips the integrand
    from below (guard for square-root payoffs) and warns when active.
    """
    grid = omega.grid
    iT = grid.index_of(T)
    ia, ib = snap_support(grid, model.support)
    vals = np.zeros(len(grid))
    Tf = grid.nodes[iT]
    for i in range(ia, ib + 1):
        s = grid.nodes[i]
        x = omega.values[i]
        if i <= iT:
            vals[i] = float(model.f(s, x))
        else:
            vals[i] = float(smoothed_variance(model, spec, s, x, cfg, T=Tf,
                                              node_index=i))
    if floor > 0.0 and np.any(vals[ia:ib + 1] < floor):
        warnings.warn("terminal-variance integrand floored at %.1e" % floor,
                      FloorActivatedWarning, stacklevel=2)
        vals[ia:ib + 1] = np.maximum(vals[ia:ib + 1], floor)
    w = support_trapezoid(grid, ia, ib)
    return float(w @ vals)
