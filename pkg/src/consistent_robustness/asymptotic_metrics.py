"""High-dimensional limits of clean, robust and consistent robust errors.

For a linear classifier the teacher field nu and the model field mu are
jointly Gaussian with covariance [[1, m], [m, q]].  A worst-case attack
lowers the signed margin y * mu by a deterministic shift, so every metric
is a Gaussian probability of a shifted half-space:

    clean      P[y mu < 0]
    robust     P[y mu < shift]                 (shift from the full dual norm)
    cns robust P[y mu < shift_cns]             (shift from the distance to span(teacher))
    boundary   P[0 <= y mu < shift_cns]

Conditioning on mu = sqrt(q) t leaves one-dimensional integrals of
phi(t) * Phi(a t), which are evaluated by adaptive quadrature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .special_math import (
    GaussRule,
    abs_moment_shifted,
    gamma,
    minimize_scalar,
    std_normal_cdf,
    std_normal_pdf,
)

__all__ = [
    "OverlapPair",
    "MetricsReport",
    "CoordinateComponent",
    "gaussian_norm_constant",
    "factor_consistent_wellspec",
    "factor_inconsistent",
    "error_from_shift",
    "clean_error",
    "metrics_from_factors",
    "metrics_wellspec",
    "dual_distance_factor",
    "factor_consistent_latent",
    "factor_inconsistent_latent",
    "metrics_latent",
]

_CUTOFF = 8.0
_QUAD_TOL = 1e-13


@dataclass(frozen=True)
class OverlapPair:
    """Teacher/model field overlap ``m`` and model field variance ``q_ov``.

    Optional latent extras: ``q_ell`` (latent-space norm), ``q_f`` (feature
    norm) and ``P`` (training-geometry norm).
    """

    m: float
    q_ov: float
    q_ell: float | None = None
    q_f: float | None = None
    P: float | None = None
    label_noise: float = 0.0

    def __post_init__(self):
        if not self.q_ov > 0:
            raise ValueError(f"model self-overlap must be positive, got {self.q_ov}")
        if self.q_ov < self.m**2 * (1 - 1e-12):
            raise ValueError(f"invalid covariance: q_ov={self.q_ov} < m^2={self.m**2}")

    @property
    def slope(self) -> float:
        """a such that P[y = +1 | mu = sqrt(q) t] = Phi(a t)."""
        resid = max(self.q_ov - self.m**2, 0.0) + self.q_ov * self.label_noise
        if resid == 0.0:
            return math.copysign(math.inf, self.m) if self.m else 0.0
        return self.m / math.sqrt(resid)


@dataclass
class MetricsReport:
    eps_tilde: np.ndarray
    clean: float
    rob: np.ndarray
    rob_cns: np.ndarray
    bnd_cns: np.ndarray
    provenance: str = "asymptotic"
    meta: dict = field(default_factory=dict)

    def rows(self):
        for i, e in enumerate(self.eps_tilde):
            yield {
                "eps_tilde": float(e),
                "E_clean": self.clean,
                "E_rob": float(self.rob[i]),
                "E_rob_cns": float(self.rob_cns[i]),
                "E_bnd_cns": float(self.bnd_cns[i]),
            }


def gaussian_norm_constant(q_dual: float) -> float:
    """Limit of d^{-1/q} ||g||_q for g with i.i.d. standard normal entries."""
    return math.sqrt(2.0) * (gamma((q_dual + 1) / 2) / math.sqrt(math.pi)) ** (1.0 / q_dual)


def factor_consistent_wellspec(ov: OverlapPair, q_dual: float) -> float:
    if ov.q_ov < ov.m**2 * (1 - 1e-12):
        raise ValueError("q_ov < m^2")
    return math.sqrt(max(ov.q_ov - ov.m**2, 0.0)) * gaussian_norm_constant(q_dual)


def factor_inconsistent(q_ov: float, q_dual: float) -> float:
    return math.sqrt(q_ov) * gaussian_norm_constant(q_dual)


def _phi_Phi(a: float):
    if math.isinf(a):
        step = 1.0 if a > 0 else 0.0
        return lambda t: std_normal_pdf(t) * (step if t > 0 else 1.0 - step)
    return lambda t: std_normal_pdf(t) * std_normal_cdf(a * t)


def _integral(f, lo: float, hi: float) -> float:
    lo, hi = min(lo, _CUTOFF), min(hi, _CUTOFF)
    if hi <= lo:
        return 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val = integrate.quad(f, lo, hi, epsabs=_QUAD_TOL, epsrel=_QUAD_TOL, limit=200)[0]
    return max(val, 0.0)


def clean_error(ov: OverlapPair) -> float:
    """P[y mu < 0] = 2 int_0^inf phi(t) Phi(-a t) dt."""
    return min(2.0 * _integral(_phi_Phi(-ov.slope), 0.0, _CUTOFF), 1.0)


def _boundary_increment(ov: OverlapPair, s_lo: float, s_hi: float) -> float:
    """P[s_lo <= y mu < s_hi] for 0 <= s_lo <= s_hi."""
    root = math.sqrt(ov.q_ov)
    return 2.0 * _integral(_phi_Phi(ov.slope), s_lo / root, s_hi / root)


def error_from_shift(ov: OverlapPair, shift: float, kind: str = "robust") -> float:
    """P[y mu < shift] (robust) or P[0 <= y mu < shift] (boundary)."""
    if shift < 0:
        raise ValueError("shift must be nonnegative")
    bnd = _boundary_increment(ov, 0.0, shift)
    if kind == "boundary":
        return min(bnd, 1.0)
    if kind == "robust":
        return min(clean_error(ov) + bnd, 1.0)
    raise ValueError(f"unknown error kind {kind!r}")


def metrics_from_factors(
    ov: OverlapPair,
    eps_tilde: Sequence[float],
    factor_cns: float,
    factor_inc: float,
    provenance: str = "asymptotic",
    meta: dict | None = None,
) -> MetricsReport:
    """Metrics on an eps grid with shifts eps * factor_cns and eps * factor_inc.

    Increments are accumulated along the sorted grid, so the curves are
    nondecreasing and nested by construction.
    """
    eps = np.asarray(eps_tilde, dtype=float)
    if np.any(eps < 0):
        raise ValueError("eps grid must be nonnegative")
    if factor_cns > factor_inc * (1 + 1e-12):
        raise ValueError("consistent factor exceeds the unconstrained factor")
    factor_cns = min(factor_cns, factor_inc)
    clean = clean_error(ov)
    order = np.argsort(eps, kind="stable")
    bnd = np.zeros_like(eps)
    extra = np.zeros_like(eps)
    acc, prev = 0.0, 0.0
    for i in order:
        s = eps[i] * factor_cns
        acc += _boundary_increment(ov, prev, s)
        prev = s
        bnd[i] = acc
        extra[i] = _boundary_increment(ov, s, eps[i] * factor_inc)
    bnd = np.minimum(bnd, 1.0 - clean)
    rob_cns = clean + bnd
    rob = np.minimum(rob_cns + extra, 1.0)
    rob_cns = np.minimum(rob_cns, rob)
    # Accumulated extras can disagree with a fresh evaluation by rounding; restore monotonicity.
    rob[order] = np.maximum.accumulate(rob[order])
    info = {"factor_cns": factor_cns, "factor_inc": factor_inc, "m": ov.m, "q_ov": ov.q_ov}
    info.update(meta or {})
    return MetricsReport(eps, clean, rob, rob_cns, bnd, provenance, info)


def metrics_wellspec(ov: OverlapPair, q_att: float, eps_tilde: Sequence[float]) -> MetricsReport:
    from .geometry import dual_exponent

    qd = dual_exponent(q_att)
    return metrics_from_factors(
        ov,
        eps_tilde,
        factor_consistent_wellspec(ov, qd),
        factor_inconsistent(ov.q_ov, qd),
        meta={"q_att": q_att, "model": "wellspec"},
    )


# ---------------------------------------------------------------------------
# Latent model: the attack acts on latent coordinates, whose law is a mixture
# of components.  In a component the coordinate is scale * theta(rho), with
#   rho = b xi + c w,  theta(rho) = soft(rho, threshold) / (Lambda + 2 lam),
# w ~ N(0, 1) the teacher coordinate and xi ~ N(0, 1) independent.  A
# component with scale 0 is a coordinate the model cannot reach.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoordinateComponent:
    weight: float
    scale: float
    b: float = 0.0
    c: float = 0.0
    Lambda: float = 1.0


def _component_moment(comp: CoordinateComponent, kappa: float, q_dual: float, lam: float, threshold: float, rule_order: int) -> float:
    """E|scale * theta(rho) - kappa * w|^q_dual for one component."""
    w_abs_moment = 2 ** (q_dual / 2) * gamma((q_dual + 1) / 2) / math.sqrt(math.pi)
    sigma2 = comp.b**2 + comp.c**2
    if comp.scale == 0.0 or sigma2 == 0.0:
        return abs(kappa) ** q_dual * w_abs_moment
    sigma = math.sqrt(sigma2)
    t_thr = threshold / sigma
    rule = GaussRule(panels=32, order=rule_order, breaks=(-t_thr, t_thr))
    t = rule.nodes
    rho = sigma * t
    theta = np.sign(rho) * np.maximum(np.abs(rho) - threshold, 0.0) / (comp.Lambda + 2 * lam)
    # w | rho ~ N(c rho / sigma^2, 1 - c^2 / sigma^2)
    mean = comp.scale * theta - kappa * comp.c * rho / sigma2
    sd = abs(kappa) * math.sqrt(max(1.0 - comp.c**2 / sigma2, 0.0))
    return rule.expect(abs_moment_shifted(mean, sd, q_dual))


def dual_distance_factor(
    components: Sequence[CoordinateComponent],
    kappa: float,
    q_dual: float,
    lam: float,
    threshold: float,
    rule_order: int = 12,
) -> float:
    """(sum_k weight_k E|scale_k theta_k - kappa w|^q_dual)^(1/q_dual)."""
    total = sum(c.weight * _component_moment(c, kappa, q_dual, lam, threshold, rule_order) for c in components)
    return max(total, 0.0) ** (1.0 / q_dual)


def factor_consistent_latent(
    components: Sequence[CoordinateComponent],
    q_dual: float,
    lam: float,
    threshold: float,
) -> tuple[float, float]:
    """Minimize the latent dual-norm factor over kappa; returns (factor, kappa*)."""
    at_zero = dual_distance_factor(components, 0.0, q_dual, lam, threshold)
    w_norm = dual_distance_factor([CoordinateComponent(sum(c.weight for c in components), 0.0)], 1.0, q_dual, lam, threshold)
    if at_zero == 0.0:
        return 0.0, 0.0
    # Triangle inequality in L^q: |kappa*| ||w|| <= 2 * value at kappa = 0.
    bound = 2.0 * at_zero / w_norm
    k, val = minimize_scalar(
        lambda k: dual_distance_factor(components, k, q_dual, lam, threshold),
        hint=0.0,
        bracket=(-bound, bound),
        tol=1e-10,
    )
    return min(val, at_zero), k


def factor_inconsistent_latent(components, q_dual: float, lam: float, threshold: float) -> float:
    return dual_distance_factor(components, 0.0, q_dual, lam, threshold)


def metrics_latent(
    ov: OverlapPair,
    components: Sequence[CoordinateComponent],
    q_att: float,
    eps_tilde: Sequence[float],
    lam: float,
    threshold: float,
) -> MetricsReport:
    from .geometry import dual_exponent

    qd = dual_exponent(q_att)
    cns, kappa = factor_consistent_latent(components, qd, lam, threshold)
    inc = factor_inconsistent_latent(components, qd, lam, threshold)
    return metrics_from_factors(
        ov, eps_tilde, cns, inc, meta={"q_att": q_att, "model": "latent", "kappa": kappa}
    )
