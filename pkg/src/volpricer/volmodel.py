"""Instantaneous-variance maps f_s(x) with gradients, Hessians and support window.

Catalog: Bergomi-type stochastic-exponential models (one- and multi-factor),
hyperbolic and mixed hyperbolic/quadratic transforms, the quintic polynomial
model, plus user-supplied callbacks.  Every family is multiplied by an initial
variance curve zeta and vanishes outside its support window.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FAMILIES = ("one-factor-bergomi", "multi-factor-bergomi", "hyperbolic",
            "mixed-hyperbolic-quadratic", "quintic-ou", "custom")

_EXP_CLIP = 700.0  # exp overflow guard; np.exp overflows just above 709


class VolModelError(ValueError):
    """Invalid variance-model descriptor."""


class VarianceOverflowWarning(RuntimeWarning):
    """Emitted when a stochastic-exponential argument had to be clipped."""


class Curve:
    """Piecewise-linear scalar curve with flat extrapolation."""

    def __init__(self, tenors, values):
        self.tenors = np.atleast_1d(np.asarray(tenors, dtype=float))
        self.values = np.atleast_1d(np.asarray(values, dtype=float))
        if self.tenors.ndim != 1 or self.tenors.shape != self.values.shape:
            raise VolModelError("curve tenors/values must be 1-d and matching")
        if self.tenors.size == 0:
            raise VolModelError("curve needs at least one knot")
        if np.any(np.diff(self.tenors) <= 0):
            raise VolModelError("curve tenors must be strictly increasing")

    def __call__(self, t):
        return np.interp(t, self.tenors, self.values)

    @staticmethod
    def constant(v: float) -> "Curve":
        return Curve([0.0], [v])

    def knots(self):
        return [[float(a), float(b)] for a, b in zip(self.tenors, self.values)]


class MatrixCurve:
    """d x d matrix curve tabulated on time knots, linear in between, flat outside."""

    def __init__(self, times, mats):
        self.times = np.asarray(times, dtype=float)
        self.mats = np.asarray(mats, dtype=float)
        if self.mats.ndim != 3 or self.mats.shape[0] != self.times.size:
            raise VolModelError("MatrixCurve needs times (n,) and mats (n, d, d)")

    def __call__(self, s: float) -> np.ndarray:
        ts = self.times
        i = np.searchsorted(ts, s)
        if i < ts.size and ts[i] == s:
            return self.mats[i]
        if i == 0:
            return self.mats[0]
        if i >= ts.size:
            return self.mats[-1]
        w = (s - ts[i - 1]) / (ts[i] - ts[i - 1])
        return (1.0 - w) * self.mats[i - 1] + w * self.mats[i]


def _as_variance_fn(handle, d: int) -> Callable[[float], np.ndarray]:
    if handle is None:
        return lambda s: np.zeros((d, d))
    if isinstance(handle, MatrixCurve):
        return handle
    if callable(handle):
        return lambda s: np.atleast_2d(np.asarray(handle(s), dtype=float))
    raise VolModelError("variance_curve must be callable or a MatrixCurve")


def _guarded_exp(z: np.ndarray) -> np.ndarray:
    if np.any(z > _EXP_CLIP):
        warnings.warn("stochastic-exponential argument clipped at overflow guard",
                      VarianceOverflowWarning, stacklevel=3)
        z = np.minimum(z, _EXP_CLIP)
    return np.exp(z)


def _double_factorial_odd(k: int) -> int:
    # (k-1)!! for even k
    out = 1
    for j in range(k - 1, 0, -2):
        out *= j
    return out


@dataclass
class VolModel:
    """Variance map f_s(x) >= 0 with analytic gradient and Hessian.

    The map vanishes (with its derivatives) for s outside ``support``.
    ``variance_curve`` supplies s -> Var(state_s) as a d x d matrix; it feeds
    the unit-mean normalizers of the stochastic-exponential families and the
    quintic denominator.
    """

    family: str
    zeta: Curve
    nu: float = 1.0
    lambdas: tuple = (1.0,)
    alphas: tuple = (1.0, 0.0, 0.0, 0.0)
    support: tuple = (0.0, math.inf)
    d: int = 1
    variance_curve: object = None
    custom_f: Optional[Callable] = None
    custom_grad: Optional[Callable] = None
    custom_hess: Optional[Callable] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise VolModelError(f"unknown variance-model family {self.family!r}")
        if not isinstance(self.zeta, Curve):
            self.zeta = Curve.constant(float(self.zeta))
        a, b = self.support
        if not (0.0 <= a <= b):
            raise VolModelError("support must satisfy 0 <= a <= b")
        lam = np.asarray(self.lambdas, dtype=float)
        if self.family in ("multi-factor-bergomi", "hyperbolic",
                           "mixed-hyperbolic-quadratic"):
            if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-12:
                raise VolModelError("weights must be >= 0 and sum to 1")
            if lam.size != self.d:
                raise VolModelError("one weight per factor required")
        if self.family == "mixed-hyperbolic-quadratic" and self.d != 2:
            raise VolModelError("mixed-hyperbolic-quadratic is a two-factor model")
        if self.family == "quintic-ou":
            if self.d != 1:
                raise VolModelError("quintic model is one-dimensional")
            if len(self.alphas) != 4 or any(a_ < 0 for a_ in self.alphas):
                raise VolModelError("quintic needs alphas (a0, a1, a3, a5) >= 0")
        if self.family == "custom":
            if self.custom_f is None or self.custom_grad is None or self.custom_hess is None:
                raise VolModelError("custom model requires f, grad and hess callbacks")
        self._var = _as_variance_fn(self.variance_curve, self.d)

    # -- helpers -----------------------------------------------------------

    def in_support(self, s: float) -> bool:
        a, b = self.support
        return a - 1e-12 <= s <= b + 1e-12

    def _diag_var(self, s: float) -> np.ndarray:
        return np.diag(self._var(s)).astype(float)

    def _quintic_coeffs(self):
        a0, a1, a3, a5 = self.alphas
        return np.array([a0, a1, 0.0, a3, 0.0, a5])

    def _quintic_norm(self, v: float) -> float:
        # E[p(Z)^2] for Z ~ N(0, v) from Gaussian moments of the squared polynomial
        c = self._quintic_coeffs()
        sq = np.convolve(c, c)
        out = 0.0
        for k in range(0, sq.size, 2):
            out += sq[k] * v ** (k // 2) * _double_factorial_odd(k)
        if out < 1e-300:
            raise VolModelError("quintic normalizer vanished; alphas degenerate")
        return out

    # -- evaluation --------------------------------------------------------

    def f(self, s: float, x) -> np.ndarray:
        """Instantaneous variance at time s and state x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise VolModelError(f"state must have last dimension {self.d}")
        if not self.in_support(s):
            return np.zeros(x.shape[:-1])
        z = float(self.zeta(s))
        if self.family == "custom":
            return np.asarray(self.custom_f(s, x), dtype=float)
        if self.family == "one-factor-bergomi":
            v = self._diag_var(s)[0]
            return z * _guarded_exp(self.nu * x[..., 0] - 0.5 * self.nu ** 2 * v)
        if self.family == "multi-factor-bergomi":
            v = self._diag_var(s)
            lam = np.asarray(self.lambdas)
            e = _guarded_exp(self.nu * x - 0.5 * self.nu ** 2 * v)
            return z * np.tensordot(e, lam, axes=([-1], [0]))
        if self.family == "hyperbolic":
            lam = np.asarray(self.lambdas)
            y = self.nu * x
            h = y + np.sqrt(y * y + 1.0)
            return z * np.tensordot(h, lam, axes=([-1], [0]))
        if self.family == "mixed-hyperbolic-quadratic":
            lam = np.asarray(self.lambdas)
            v2 = self._diag_var(s)[1]
            y1 = self.nu * x[..., 0]
            y2 = self.nu * x[..., 1]
            hyp = y1 + np.sqrt(y1 * y1 + 1.0)
            quad = (1.0 + y2 * y2) / (1.0 + self.nu ** 2 * v2)
            return z * (lam[0] * hyp + lam[1] * quad)
        # quintic-ou
        v = self._diag_var(s)[0]
        c = self._quintic_coeffs()
        p = np.polyval(c[::-1], x[..., 0])
        return z * p * p / self._quintic_norm(v)

    def grad(self, s: float, x) -> np.ndarray:
        """Gradient of f in x, shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if not self.in_support(s):
            return np.zeros(x.shape)
        z = float(self.zeta(s))
        if self.family == "custom":
            return np.asarray(self.custom_grad(s, x), dtype=float)
        if self.family == "one-factor-bergomi":
            return (self.nu * self.f(s, x))[..., None]
        if self.family == "multi-factor-bergomi":
            v = self._diag_var(s)
            lam = np.asarray(self.lambdas)
            e = _guarded_exp(self.nu * x - 0.5 * self.nu ** 2 * v)
            return z * self.nu * lam * e
        if self.family == "hyperbolic":
            lam = np.asarray(self.lambdas)
            y = self.nu * x
            dh = 1.0 + y / np.sqrt(y * y + 1.0)
            return z * self.nu * lam * dh
        if self.family == "mixed-hyperbolic-quadratic":
            lam = np.asarray(self.lambdas)
            v2 = self._diag_var(s)[1]
            out = np.zeros(x.shape)
            y1 = self.nu * x[..., 0]
            y2 = self.nu * x[..., 1]
            out[..., 0] = lam[0] * self.nu * (1.0 + y1 / np.sqrt(y1 * y1 + 1.0))
            out[..., 1] = lam[1] * self.nu * 2.0 * y2 / (1.0 + self.nu ** 2 * v2)
            return z * out
        v = self._diag_var(s)[0]
        c = self._quintic_coeffs()
        dc = np.polynomial.polynomial.polyder(c)
        p = np.polyval(c[::-1], x[..., 0])
        dp = np.polyval(dc[::-1], x[..., 0])
        return (z * 2.0 * p * dp / self._quintic_norm(v))[..., None]

    def hess(self, s: float, x) -> np.ndarray:
        """Hessian of f in x, shape (..., d, d), symmetric."""
        x = np.asarray(x, dtype=float)
        if not self.in_support(s):
            return np.zeros(x.shape + (self.d,))
        z = float(self.zeta(s))
        if self.family == "custom":
            return np.asarray(self.custom_hess(s, x), dtype=float)
        if self.family == "one-factor-bergomi":
            return (self.nu ** 2 * self.f(s, x))[..., None, None]
        out = np.zeros(x.shape + (self.d,))
        if self.family == "multi-factor-bergomi":
            v = self._diag_var(s)
            lam = np.asarray(self.lambdas)
            e = _guarded_exp(self.nu * x - 0.5 * self.nu ** 2 * v)
            diag = z * self.nu ** 2 * lam * e
        elif self.family == "hyperbolic":
            lam = np.asarray(self.lambdas)
            y = self.nu * x
            d2h = (y * y + 1.0) ** -1.5
            diag = z * self.nu ** 2 * lam * d2h
        elif self.family == "mixed-hyperbolic-quadratic":
            lam = np.asarray(self.lambdas)
            v2 = self._diag_var(s)[1]
            diag = np.zeros(x.shape)
            y1 = self.nu * x[..., 0]
            diag[..., 0] = lam[0] * self.nu ** 2 * (y1 * y1 + 1.0) ** -1.5
            diag[..., 1] = lam[1] * self.nu ** 2 * 2.0 / (1.0 + self.nu ** 2 * v2)
            diag = z * diag
        else:  # quintic-ou
            v = self._diag_var(s)[0]
            c = self._quintic_coeffs()
            dc = np.polynomial.polynomial.polyder(c)
            d2c = np.polynomial.polynomial.polyder(dc)
            p = np.polyval(c[::-1], x[..., 0])
            dp = np.polyval(dc[::-1], x[..., 0])
            d2p = np.polyval(d2c[::-1], x[..., 0])
            diag = (z * 2.0 * (dp * dp + p * d2p) / self._quintic_norm(v))[..., None]
        idx = np.arange(self.d)
        out[..., idx, idx] = diag
        return out

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        if self.family == "custom":
            raise VolModelError("custom models are not JSON-serializable")
        return {"family": self.family, "zeta": self.zeta.knots(), "nu": self.nu,
                "lambdas": list(self.lambdas), "alphas": list(self.alphas),
                "support": [float(self.support[0]), float(self.support[1])],
                "d": self.d}

    @staticmethod
    def from_dict(data: dict, variance_curve=None) -> "VolModel":
        knots = data.get("zeta", [[0.0, 0.04]])
        zeta = Curve([k[0] for k in knots], [k[1] for k in knots])
        return VolModel(family=data["family"], zeta=zeta,
                        nu=float(data.get("nu", 1.0)),
                        lambdas=tuple(data.get("lambdas", [1.0])),
                        alphas=tuple(data.get("alphas", [1.0, 0.0, 0.0, 0.0])),
                        support=tuple(data.get("support", [0.0, math.inf])),
                        d=int(data.get("d", 1)),
                        variance_curve=variance_curve)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_json(text: str, variance_curve=None) -> "VolModel":
        return VolModel.from_dict(json.loads(text), variance_curve=variance_curve)

    def with_variance_curve(self, handle) -> "VolModel":
        """Copy of the model wired to a new state-variance curve."""
        return VolModel(family=self.family, zeta=self.zeta, nu=self.nu,
                        lambdas=self.lambdas, alphas=self.alphas,
                        support=self.support, d=self.d, variance_curve=handle,
                        custom_f=self.custom_f, custom_grad=self.custom_grad,
                        custom_hess=self.custom_hess)

    def with_support(self, support) -> "VolModel":
        return VolModel(family=self.family, zeta=self.zeta, nu=self.nu,
                        lambdas=self.lambdas, alphas=self.alphas,
                        support=tuple(support), d=self.d,
                        variance_curve=self.variance_curve,
                        custom_f=self.custom_f, custom_grad=self.custom_grad,
                        custom_hess=self.custom_hess)


def verify_callbacks(model: VolModel, n: int = 25, seed: int = 0,
                     rel_tol: float = 1e-3) -> None:
    """Finite-difference check of user callbacks at load time (custom models)."""
    rng = np.random.default_rng(seed)
    a, b = model.support
    hi = b if math.isfinite(b) else a + 1.0
    h = 1e-5
    for _ in range(n):
        s = float(rng.uniform(a, hi))
        x = rng.normal(size=model.d)
        g = model.grad(s, x)
        for i in range(model.d):
            e = np.zeros(model.d)
            e[i] = h
            fd = (model.f(s, x + e) - model.f(s, x - e)) / (2 * h)
            scale = max(1.0, abs(float(g[i])))
            if abs(float(g[i]) - float(fd)) > rel_tol * scale:
                raise VolModelError(
                    f"custom gradient inconsistent with f at s={s:.4f} (entry {i})")
        hm = model.hess(s, x)
        if not np.allclose(hm, np.swapaxes(hm, -1, -2), atol=1e-10):
            raise VolModelError("custom Hessian is not symmetric")
