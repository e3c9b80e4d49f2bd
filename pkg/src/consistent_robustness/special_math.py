"""Shared numerical kernels: normal CDF, Gaussian expectations, root finding
and derivative-free scalar minimization.

All routines are thin, tolerance-checked wrappers over SciPy, plus a
vectorized composite Gauss-Legendre rule used on hot paths where the
integrand is evaluated on whole arrays of nodes at once.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

__all__ = [
    "QuadratureSpec",
    "RootFindSpec",
    "QuadratureError",
    "RootFindError",
    "MinimizeWarning",
    "GaussRule",
    "std_normal_cdf",
    "std_normal_pdf",
    "gamma",
    "gauss_expectation",
    "find_root",
    "minimize_scalar",
    "abs_moment_shifted",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""

    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(f"{message} (estimate={estimate!r}, error={error!r})")
        self.estimate = estimate
        self.error = error


class RootFindError(RuntimeError):
    """No sign change could be bracketed, or the solver did not converge."""


class MinimizeWarning(RuntimeWarning):
    """The scalar minimizer hit its iteration budget."""


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    cutoff: float = 8.0
    limit: int = 200

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("quadrature tolerances must be positive")
        if self.cutoff < 6:
            raise ValueError("quadrature cutoff must be at least 6")


@dataclass(frozen=True)
class RootFindSpec:
    expansion: float = 2.0
    tol: float = 1e-12
    max_iter: int = 200
    max_expansions: int = 60

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("root-finding tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.expansion <= 1:
            raise ValueError("bracket expansion factor must exceed 1")


def std_normal_cdf(t):
    """Standard normal CDF, saturating cleanly at 0 and 1."""
    return special.ndtr(t)


def std_normal_pdf(t):
    t = np.asarray(t, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * t * t)


def gamma(x):
    return special.gamma(x)


def gauss_expectation(
    f: Callable[[float], float],
    spec: QuadratureSpec = QuadratureSpec(),
    points: tuple[float, ...] | None = None,
) -> float:
    """Return E[f(xi)] for xi ~ N(0, 1) by adaptive quadrature on [-cutoff, cutoff].

    ``points`` lists known kinks of ``f`` (in xi units) inside the window.
    """
    c = spec.cutoff

    def integrand(x):
        return f(x) * _INV_SQRT_2PI * math.exp(-0.5 * x * x)

    inner = None
    if points:
        inner = sorted(p for p in points if -c < p < c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, err, info = integrate.quad(
            integrand,
            -c,
            c,
            epsabs=spec.abs_tol,
            epsrel=spec.rel_tol,
            limit=spec.limit,
            points=inner or None,
            full_output=1,
        )[:3]
    if err > max(10 * spec.abs_tol, 10 * spec.rel_tol * abs(value)):
        raise QuadratureError("Gaussian expectation did not converge", value, err)
    return value


def find_root(
    g: Callable[[float], float],
    bracket: tuple[float, float],
    spec: RootFindSpec = RootFindSpec(),
) -> float:
    """Brent root finder with automatic outward bracket expansion."""
    a, b = float(bracket[0]), float(bracket[1])
    if a > b:
        a, b = b, a
    ga, gb = g(a), g(b)
    expansions = 0
    while ga * gb > 0:
        if expansions >= spec.max_expansions:
            raise RootFindError(f"no sign change found around bracket {bracket}")
        width = max(b - a, 1e-8)
        if abs(ga) < abs(gb):
            a -= spec.expansion * width
            ga = g(a)
        else:
            b += spec.expansion * width
            gb = g(b)
        expansions += 1
    if ga == 0:
        return a
    if gb == 0:
        return b
    try:
        root = optimize.brentq(g, a, b, xtol=spec.tol, rtol=4 * np.finfo(float).eps, maxiter=spec.max_iter)
    except RuntimeError as exc:
        raise RootFindError(str(exc)) from exc
    return root


def minimize_scalar(
    h: Callable[[float], float],
    hint: float = 0.0,
    bracket: tuple[float, float] | None = None,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> tuple[float, float]:
    """Brent's golden-section/parabolic minimizer.

    With ``bracket`` the search is restricted to that interval; otherwise a
    downhill bracket is grown from ``hint``.  The returned point never has a
    larger objective than the hint itself.
    """
    if bracket is not None:
        lo, hi = bracket
        res = optimize.minimize_scalar(
            h, bounds=(lo, hi), method="bounded", options={"xatol": tol, "maxiter": max_iter}
        )
    else:
        res = optimize.minimize_scalar(
            h, bracket=(hint, hint + 1.0), method="brent", options={"xtol": tol, "maxiter": max_iter}
        )
    if not res.success:
        warnings.warn(f"scalar minimization stopped early: {res.message}", MinimizeWarning, stacklevel=2)
    x, fx = float(res.x), float(res.fun)
    fh = h(hint)
    if fh < fx:
        return float(hint), float(fh)
    return x, fx


class GaussRule:
    """Composite Gauss-Legendre nodes for E[f(xi)], xi ~ N(0, 1).

    The window [-cutoff, cutoff] is split into equal panels, optionally
    refined at caller-supplied breakpoints.  Weights already include the
    normal density, so ``rule.expect(values)`` is a weighted sum.
    """

    def __init__(self, panels: int = 64, order: int = 10, cutoff: float = 8.0, breaks=()):
        edges = np.linspace(-cutoff, cutoff, panels + 1)
        extra = [b for b in breaks if -cutoff < b < cutoff]
        if extra:
            edges = np.unique(np.concatenate([edges, extra]))
        x, w = np.polynomial.legendre.leggauss(order)
        lo, hi = edges[:-1, None], edges[1:, None]
        half = 0.5 * (hi - lo)
        nodes = (lo + hi) / 2 + half * x[None, :]
        weights = half * w[None, :]
        self.nodes = nodes.ravel()
        self.weights = (weights * std_normal_pdf(nodes)).ravel()

    def expect(self, values) -> float:
        return float(np.dot(self.weights, values))


def abs_moment_shifted(mean, scale, power: float, order: int = 40):
    """E|mean + scale * Z|^power for Z ~ N(0, 1), elementwise.

    Closed forms for power 1 and 2.  Otherwise each side of the kink at
    Z = -mean/scale is integrated by Gauss-Jacobi with weight u^power in the
    distance u to the kink, so the power singularity is exact and only the
    smooth normal density is approximated.  Truncated at 10 standard
    deviations.
    """
    mean = np.asarray(mean, dtype=float)
    scale = np.abs(np.asarray(scale, dtype=float))
    mean, scale = np.broadcast_arrays(mean, scale)
    if power == 2:
        return mean**2 + scale**2
    out = np.empty(mean.shape)
    tiny = scale <= 1e-300
    out[tiny] = np.abs(mean[tiny]) ** power
    m, s = mean[~tiny], scale[~tiny]
    if power == 1:
        t = m / s
        out[~tiny] = m * (2 * special.ndtr(t) - 1) + 2 * s * std_normal_pdf(t)
        return out
    kink = -m / s
    inside = np.abs(kink) < 10.0
    total = np.zeros_like(m)
    x, w = special.roots_jacobi(order, 0.0, power)
    k = kink[inside]
    for side in (-1.0, 1.0):
        length = 10.0 - side * k
        u = 0.5 * length[:, None] * (1.0 + x[None, :])
        dens = std_normal_pdf(k[:, None] + side * u)
        total[inside] += (0.5 * length) ** (power + 1) * (dens @ w)
    # Kink outside the window: the integrand is smooth there.
    xl, wl = np.polynomial.legendre.leggauss(2 * order)
    z = 10.0 * xl
    k = kink[~inside]
    total[~inside] = 10.0 * (np.abs(z[None, :] - k[:, None]) ** power * std_normal_pdf(z)[None, :]) @ wl
    out[~tiny] = s**power * total
    return out
