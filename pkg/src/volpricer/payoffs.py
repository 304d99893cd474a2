"""Terminal payoff transforms phi with first and second derivatives.

VIX payoffs read the accumulated variance x through y = sqrt(x)/window, RV
payoffs through y = x/maturity.  Smoothed call variants replace the kink by a
softplus of width eps so that the PDE checks have the smoothness they need.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

FAMILIES = ("identity", "vix-future", "vix-call", "rv-swap", "rv-call",
            "smoothed-vix-call", "smoothed-rv-call", "custom")

DEFAULT_WINDOW = 30.0 / 365.0


class PayoffError(ValueError):
    """Invalid payoff descriptor."""


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class Payoff:
    """Terminal transform phi(x) for x > 0, with phi' and phi''.

    ``strike`` is quoted in the payoff's own units (VIX scale for vix
    families, annualized variance for rv families).  ``maturity`` divides the
    rv payoffs; ``delta_window`` divides the vix square root.
    """

    family: str
    strike: float = 0.0
    maturity: float = 1.0
    delta_window: float = DEFAULT_WINDOW
    eps_smooth: float = 0.01
    custom_value: Optional[Callable] = None
    custom_d1: Optional[Callable] = None
    custom_d2: Optional[Callable] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise PayoffError(f"unknown payoff family {self.family!r}")
        if self.family in ("vix-call", "rv-call", "smoothed-vix-call",
                           "smoothed-rv-call") and self.strike <= 0.0:
            raise PayoffError("calls need a strike > 0")
        if self.delta_window <= 0.0 or self.maturity <= 0.0:
            raise PayoffError("maturity and delta_window must be > 0")
        if self.family.startswith("smoothed") and self.eps_smooth <= 0.0:
            raise PayoffError("smoothed payoffs need eps_smooth > 0")
        if self.family == "custom" and (self.custom_value is None
                                        or self.custom_d1 is None
                                        or self.custom_d2 is None):
            raise PayoffError("custom payoff requires value, d1 and d2 callables")

    # -- properties --------------------------------------------------------

    @property
    def needs_positive(self) -> bool:
        """True when phi reads sqrt(x) and a positivity floor applies."""
        return self.family in ("vix-future", "vix-call", "smoothed-vix-call")

    @property
    def is_smooth(self) -> bool:
        """Twice continuously differentiable on x > 0."""
        return self.family in ("identity", "vix-future", "rv-swap",
                               "smoothed-vix-call", "smoothed-rv-call")

    # -- evaluation --------------------------------------------------------

    def value(self, x):
        x = np.asarray(x, dtype=float)
        k, dw, T = self.strike, self.delta_window, self.maturity
        if self.family == "identity":
            return x + 0.0
        if self.family == "vix-future":
            return np.sqrt(x) / dw
        if self.family == "vix-call":
            return np.maximum(np.sqrt(x) / dw - k, 0.0)
        if self.family == "rv-swap":
            return x / T - k
        if self.family == "rv-call":
            return np.maximum(x / T - k, 0.0)
        if self.family == "smoothed-vix-call":
            return self.eps_smooth * _softplus((np.sqrt(x) / dw - k) / self.eps_smooth)
        if self.family == "smoothed-rv-call":
            return self.eps_smooth * _softplus((x / T - k) / self.eps_smooth)
        return np.asarray(self.custom_value(x), dtype=float)

    def d1(self, x):
        x = np.asarray(x, dtype=float)
        k, dw, T = self.strike, self.delta_window, self.maturity
        if self.family == "identity":
            return np.ones_like(x)
        if self.family == "vix-future":
            return 0.5 / (dw * np.sqrt(x))
        if self.family == "vix-call":
            return np.where(np.sqrt(x) / dw > k, 0.5 / (dw * np.sqrt(x)), 0.0)
        if self.family == "rv-swap":
            return np.full_like(x, 1.0 / T)
        if self.family == "rv-call":
            return np.where(x / T > k, 1.0 / T, 0.0)
        if self.family == "smoothed-vix-call":
            y = np.sqrt(x) / dw
            return expit((y - k) / self.eps_smooth) * 0.5 / (dw * np.sqrt(x))
        if self.family == "smoothed-rv-call":
            return expit((x / T - k) / self.eps_smooth) / T
        return np.asarray(self.custom_d1(x), dtype=float)

    def d2(self, x):
        x = np.asarray(x, dtype=float)
        k, dw, T = self.strike, self.delta_window, self.maturity
        if self.family in ("identity", "rv-swap"):
            return np.zeros_like(x)
        if self.family == "vix-future":
            return -0.25 / (dw * x ** 1.5)
        if self.family == "vix-call":
            return np.where(np.sqrt(x) / dw > k, -0.25 / (dw * x ** 1.5), 0.0)
        if self.family == "rv-call":
            return np.zeros_like(x)
        if self.family == "smoothed-vix-call":
            y = np.sqrt(x) / dw
            z = (y - k) / self.eps_smooth
            sig = expit(z)
            dy = 0.5 / (dw * np.sqrt(x))
            d2y = -0.25 / (dw * x ** 1.5)
            return sig * (1.0 - sig) / self.eps_smooth * dy * dy + sig * d2y
        if self.family == "smoothed-rv-call":
            z = (x / T - k) / self.eps_smooth
            sig = expit(z)
            return sig * (1.0 - sig) / (self.eps_smooth * T * T)
        return np.asarray(self.custom_d2(x), dtype=float)

    def smoothed(self, eps: Optional[float] = None) -> "Payoff":
        """Smoothed counterpart of a call payoff (used by the PDE checks)."""
        eps = self.eps_smooth if eps is None else eps
        if self.family in ("smoothed-vix-call", "smoothed-rv-call"):
            return Payoff(self.family, self.strike, self.maturity,
                          self.delta_window, eps)
        if self.family == "vix-call":
            return Payoff("smoothed-vix-call", self.strike, self.maturity,
                          self.delta_window, eps)
        if self.family == "rv-call":
            return Payoff("smoothed-rv-call", self.strike, self.maturity,
                          self.delta_window, eps)
        if self.is_smooth:
            return self
        raise PayoffError(f"no smoothed variant for family {self.family!r}")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        if self.family == "custom":
            raise PayoffError("custom payoffs are not JSON-serializable")
        return {"family": self.family, "strike": self.strike,
                "maturity": self.maturity, "delta_window": self.delta_window,
                "eps_smooth": self.eps_smooth}

    @staticmethod
    def from_dict(data: dict) -> "Payoff":
        return Payoff(family=data["family"],
                      strike=float(data.get("strike", 0.0)),
                      maturity=float(data.get("maturity", 1.0)),
                      delta_window=float(data.get("delta_window", DEFAULT_WINDOW)),
                      eps_smooth=float(data.get("eps_smooth", 0.01)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Payoff":
        return Payoff.from_dict(json.loads(text))


def check_derivative_consistency(payoff: Payoff, x_lo: float = 0.02,
                                 x_hi: float = 1.0, n: int = 50,
                                 rel_tol: float = 2e-4) -> None:
    """Finite-difference consistency of (phi, phi', phi'') on positive points.

    Kinked (non-smoothed) calls are exempted near the kink.
    """
    xs = np.linspace(x_lo, x_hi, n)
    if payoff.family in ("vix-call", "rv-call"):
        y = np.sqrt(xs) / payoff.delta_window if payoff.family == "vix-call" \
            else xs / payoff.maturity
        xs = xs[np.abs(y - payoff.strike) > 0.05 * max(payoff.strike, 1.0)]
    h = 1e-6
    v1 = (payoff.value(xs + h) - payoff.value(xs - h)) / (2 * h)
    g1 = payoff.d1(xs)
    scale = np.maximum(1.0, np.abs(g1))
    if np.any(np.abs(v1 - g1) > rel_tol * scale):
        raise PayoffError("phi' inconsistent with finite differences of phi")
    v2 = (payoff.d1(xs + h) - payoff.d1(xs - h)) / (2 * h)
    g2 = payoff.d2(xs)
    scale = np.maximum(1.0, np.abs(g2))
    if np.any(np.abs(v2 - g2) > 10 * rel_tol * scale):
        raise PayoffError("phi'' inconsistent with finite differences of phi'")
