"""Margin losses and their proximal operators.

Every loss is a convex, non-increasing function of the margin u = y * z.
The proximal map of the shifted loss z -> loss(y z - shift) reduces to a
one-dimensional problem in the margin:

    u* = argmin_u loss(u) + (u - a)^2 / (2 V),   a = y omega - shift,

after which z* = y (u* + shift).
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .special_math import RootFindSpec, find_root

__all__ = ["Loss", "LogisticLoss", "HingeLoss", "get_loss"]


class Loss:
    name = "abstract"

    def value(self, u):
        raise NotImplementedError

    def margin_prox(self, a, V):
        """Vectorized argmin_u loss(u) + (u - a)^2 / (2 V)."""
        raise NotImplementedError

    def prox(self, y, omega, V, shift=0.0):
        """Proximal point of z -> loss(y z - shift) at omega with step V."""
        y = np.asarray(y, dtype=float)
        a = y * np.asarray(omega, dtype=float) - shift
        return y * (self.margin_prox(a, V) + shift)

    def kinks(self, V: float) -> tuple[float, ...]:
        """Shifted margins a at which margin_prox(a, V) is not differentiable."""
        return ()

    def smoothed(self, u, width: float):
        """Value, first and second derivative of a twice-differentiable surrogate.

        ``width`` controls how far the surrogate departs from the loss; smooth
        losses ignore it.
        """
        raise NotImplementedError


class LogisticLoss(Loss):
    name = "logistic"

    def value(self, u):
        return np.logaddexp(0.0, -np.asarray(u, dtype=float))

    def derivative(self, u):
        return -special.expit(-np.asarray(u, dtype=float))

    def second(self, u):
        s = special.expit(np.asarray(u, dtype=float))
        return s * (1.0 - s)

    def smoothed(self, u, width: float = 0.0):
        return self.value(u), self.derivative(u), self.second(u)

    def margin_prox(self, a, V, tol: float = 1e-14, max_iter: int = 100):
        # Stationarity: u - a - V * sigmoid(-u) = 0, increasing in u, root in [a, a + V].
        a = np.asarray(a, dtype=float)
        V = np.broadcast_to(np.asarray(V, dtype=float), a.shape)
        lo = a.copy()
        hi = a + V
        # Bisect until Newton's quadratic convergence region is reached, then polish.
        while np.max(hi - lo) > 1e-3:
            mid = 0.5 * (lo + hi)
            pos = mid - a - V * special.expit(-mid) > 0
            hi = np.where(pos, mid, hi)
            lo = np.where(pos, lo, mid)
        u = 0.5 * (lo + hi)
        for _ in range(max_iter):
            s = special.expit(-u)
            g = u - a - V * s
            u_new = np.clip(u - g / (1.0 + V * s * (1.0 - s)), lo, hi)
            if np.all(np.abs(u_new - u) <= tol * (1.0 + np.abs(u))):
                return u_new
            u = u_new
        return u

    def margin_prox_scalar(self, a: float, V: float, spec: RootFindSpec = RootFindSpec()) -> float:
        """Same as ``margin_prox`` for one argument, via the bracketing root finder."""
        g = lambda u: u - a - V * special.expit(-u)
        return find_root(g, (a, a + V), spec)


class HingeLoss(Loss):
    name = "hinge"

    def value(self, u):
        return np.maximum(0.0, 1.0 - np.asarray(u, dtype=float))

    def margin_prox(self, a, V):
        a = np.asarray(a, dtype=float)
        V = np.asarray(V, dtype=float)
        return np.where(a >= 1.0, a, np.where(a <= 1.0 - V, a + V, 1.0))

    def kinks(self, V: float) -> tuple[float, ...]:
        return (1.0 - V, 1.0)

    def smoothed(self, u, width: float = 1e-3):
        # Softplus surrogate width * log(1 + exp((1 - u) / width)).
        t = (1.0 - np.asarray(u, dtype=float)) / width
        val = width * np.logaddexp(0.0, t)
        s = special.expit(t)
        return val, -s, s * (1.0 - s) / width


_LOSSES = {"logistic": LogisticLoss, "hinge": HingeLoss}


def get_loss(name: str | Loss) -> Loss:
    if isinstance(name, Loss):
        return name
    try:
        return _LOSSES[name]()
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(_LOSSES)}") from None
