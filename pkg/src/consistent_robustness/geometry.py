"""Dual-norm geometry of consistent attacks on linear classifiers.

A perturbation is *consistent* when it is orthogonal to the teacher
weights, so the ground-truth label is unchanged.  The largest margin shift
a consistent attack of radius eps can produce against weights w is
``eps * min_k ||w - k w_star||_{q_dual}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .special_math import minimize_scalar, std_normal_cdf

__all__ = [
    "AttackGeometry",
    "LinearPair",
    "MarginSummary",
    "dual_exponent",
    "lp_norm",
    "dual_norm_distance",
    "margin_summary",
    "consistent_attack_exists",
    "inconsistent_attack_exists",
    "craft_consistent_attack",
    "existence_probability_wellspec",
    "existence_probability_latent",
    "feature_matrix",
]


def dual_exponent(q: float) -> float:
    """Hölder conjugate of q, with 1 <-> inf."""
    if q < 1:
        raise ValueError(f"norm exponent must be >= 1, got {q}")
    if math.isinf(q):
        return 1.0
    if q == 1:
        return math.inf
    return q / (q - 1.0)


def lp_norm(v, q: float) -> float:
    v = np.asarray(v, dtype=float)
    if math.isinf(q):
        return float(np.max(np.abs(v))) if v.size else 0.0
    if q == 2:
        return float(np.linalg.norm(v))
    if q == 1:
        return float(np.sum(np.abs(v)))
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0:
        return 0.0
    return scale * float(np.sum((np.abs(v) / scale) ** q) ** (1.0 / q))


@dataclass(frozen=True)
class AttackGeometry:
    """Attack norm exponent ``q_att`` (in (1, inf]) and radius ``eps``.

    ``rescaled(d)`` gives eps * d**(1/q_dual), the radius on the scale where
    high-dimensional limits are finite for covariates of variance 1/d.
    """

    q_att: float
    eps: float = 0.0
    q_dual: float = field(init=False)

    def __post_init__(self):
        if not (self.q_att > 1):
            raise ValueError(f"attack exponent must lie in (1, inf], got {self.q_att}")
        if self.eps < 0:
            raise ValueError("attack radius must be nonnegative")
        object.__setattr__(self, "q_dual", dual_exponent(self.q_att))

    @classmethod
    def from_rescaled(cls, q_att: float, eps_tilde: float, d: int) -> "AttackGeometry":
        qd = dual_exponent(q_att)
        return cls(q_att, eps_tilde * d ** (-1.0 / qd))

    def rescaled(self, d: int) -> float:
        return self.eps * d ** (1.0 / self.q_dual)

    def with_eps(self, eps: float) -> "AttackGeometry":
        return AttackGeometry(self.q_att, eps)


@dataclass(frozen=True)
class LinearPair:
    """Teacher weights (norm sqrt(d)) and model weights.

    For the latent model ``weights`` has length p and ``features`` is the
    p x d matrix F; the relevant latent-space direction is F^T weights.
    """

    teacher: np.ndarray
    weights: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.teacher, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        d = t.size
        if abs(np.linalg.norm(t) - math.sqrt(d)) > 1e-10 * math.sqrt(d):
            raise ValueError("teacher must lie on the sphere of radius sqrt(d)")
        if self.features is not None:
            f = np.asarray(self.features, dtype=float)
            if f.shape != (w.size, d):
                raise ValueError(f"feature matrix shape {f.shape} does not match p={w.size}, d={d}")
            object.__setattr__(self, "features", f)
        elif w.size != d:
            raise ValueError("weights and teacher must have the same length")
        object.__setattr__(self, "teacher", t)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.teacher.size

    def latent_direction(self) -> np.ndarray:
        """Direction in teacher space that an input perturbation is scored against."""
        if self.features is None:
            return self.weights
        return self.features.T @ self.weights

    def orthogonal_part(self) -> np.ndarray:
        v = self.latent_direction()
        return v - (self.teacher @ v / self.d) * self.teacher


@dataclass(frozen=True)
class MarginSummary:
    distance: float
    kappa: float
    dual_norm: float
    ratio: float
    margin: float | None = None


def _weighted_median_kappa(v: np.ndarray, w: np.ndarray) -> float:
    """Minimizer of sum_i |v_i - k w_i| closest to zero."""
    mask = w != 0
    r = v[mask] / w[mask]
    a = np.abs(w[mask])
    order = np.argsort(r)
    r, a = r[order], a[order]
    cum = np.cumsum(a)
    half = 0.5 * cum[-1]
    i = int(np.searchsorted(cum, half, side="left"))
    if math.isclose(cum[i], half, rel_tol=1e-14, abs_tol=0.0) and i + 1 < r.size:
        # Flat segment [r_i, r_{i+1}]: choose the point nearest zero.
        lo, hi = r[i], r[i + 1]
        return float(min(max(0.0, lo), hi))
    return float(r[i])


def dual_norm_distance(v, teacher, q_dual: float) -> tuple[float, float]:
    """Return (min_k ||v - k teacher||_{q_dual}, minimizing k)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(teacher, dtype=float)
    if q_dual < 1 or math.isinf(q_dual):
        raise ValueError(f"dual exponent must lie in [1, inf), got {q_dual}")
    if not np.any(w):
        raise ValueError("teacher weights must be nonzero")
    if q_dual == 2:
        k = float(v @ w / (w @ w))
        return lp_norm(v - k * w, 2), k
    if q_dual == 1:
        k = _weighted_median_kappa(v, w)
        return lp_norm(v - k * w, 1), k

    # |k*| <= 2||v|| / ||w|| in the same norm, so this interval contains the minimizer.
    bound = 2.0 * lp_norm(v, q_dual) / lp_norm(w, q_dual)
    if bound == 0.0:
        return 0.0, 0.0
    k, _ = minimize_scalar(lambda k: lp_norm(v - k * w, q_dual), hint=0.0, bracket=(-bound, bound), tol=1e-12)
    k = _polish_kappa(v, w, q_dual, k, bound)
    return lp_norm(v - k * w, q_dual), k


def _polish_kappa(v, w, q_dual, k0, bound):
    """Refine k so that sum_i w_i sign(r_i)|r_i|^(q-1) = 0 to machine precision."""
    scale = max(np.max(np.abs(v)), 1e-300)

    def grad(k):
        r = (v - k * w) / scale
        return float(np.sum(w * np.sign(r) * np.abs(r) ** (q_dual - 1)))

    lo, hi = k0 - 1e-6 * (abs(k0) + bound), k0 + 1e-6 * (abs(k0) + bound)
    glo, ghi = grad(lo), grad(hi)
    if glo * ghi > 0:
        lo, hi = -bound, bound
        glo, ghi = grad(lo), grad(hi)
        if glo * ghi > 0:
            return k0
    return float(optimize.brentq(grad, lo, hi, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200))


def margin_summary(pair: LinearPair, geom: AttackGeometry, x=None) -> MarginSummary:
    v = pair.latent_direction()
    dist, k = dual_norm_distance(v, pair.teacher, geom.q_dual)
    dn = lp_norm(v, geom.q_dual)
    ratio = dist / dn if dn > 0 else 0.0
    margin = None if x is None else float(pair.weights @ np.asarray(x, dtype=float))
    return MarginSummary(dist, k, dn, min(max(ratio, 0.0), 1.0), margin)


def _reaches(budget: float, margin: float, eps: float) -> bool:
    if margin == 0.0:
        return eps > 0
    return budget >= abs(margin)


def consistent_attack_exists(pair: LinearPair, x, geom: AttackGeometry) -> bool:
    """True iff some delta with ||delta||_q <= eps, <teacher, delta> = 0 flips sign(<w, x>)."""
    dist, _ = dual_norm_distance(pair.orthogonal_part(), pair.teacher, geom.q_dual)
    margin = float(pair.weights @ np.asarray(x, dtype=float))
    if dist == 0.0:
        return False
    return _reaches(geom.eps * dist, margin, geom.eps)


def inconsistent_attack_exists(pair: LinearPair, x, geom: AttackGeometry) -> bool:
    margin = float(pair.weights @ np.asarray(x, dtype=float))
    return _reaches(geom.eps * lp_norm(pair.latent_direction(), geom.q_dual), margin, geom.eps)


class NoAttackPossible(ValueError):
    """The model is aligned with the teacher; no consistent attack can move it."""


def craft_consistent_attack(pair: LinearPair, x, geom: AttackGeometry) -> np.ndarray:
    """Worst-case consistent perturbation of radius eps against the margin at x."""
    w = pair.latent_direction()
    t = pair.teacher
    qd = geom.q_dual
    dist, k = dual_norm_distance(w, t, qd)
    if dist <= 1e-14 * max(lp_norm(w, qd), 1e-300):
        raise NoAttackPossible("model weights lie in the span of the teacher")
    resid = w - k * t
    if qd == 1:
        direction = _l1_dual_direction(resid, t)
    else:
        scaled = resid / np.max(np.abs(resid))
        direction = np.sign(scaled) * np.abs(scaled) ** (qd - 1)
        direction -= (t @ direction / (t @ t)) * t
    direction /= lp_norm(direction, geom.q_att)
    margin = float(pair.weights @ np.asarray(x, dtype=float))
    sign = 1.0 if margin >= 0 else -1.0
    return -sign * geom.eps * direction


def _l1_dual_direction(resid: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    """Sign pattern of the residual, with free coordinates chosen to cancel <teacher, .>.

    Coordinates where the residual vanishes can take any value in [-1, 1];
    optimality of the weighted median guarantees a cancelling choice exists.
    """
    scale = np.max(np.abs(resid))
    free = np.abs(resid) <= 1e-12 * scale
    direction = np.sign(resid)
    direction[free] = 0.0
    imbalance = float(teacher @ direction)
    capacity = float(np.sum(np.abs(teacher[free])))
    if capacity > 0:
        share = np.clip(-imbalance / capacity, -1.0, 1.0)
        direction[free] = share * np.sign(teacher[free])
    return direction


def existence_probability_wellspec(pair: LinearPair, geom: AttackGeometry) -> float:
    """P_x[consistent attack exists] for x ~ N(0, I/d)."""
    w = pair.weights
    dist, _ = dual_norm_distance(pair.orthogonal_part(), pair.teacher, geom.q_dual)
    norm = np.linalg.norm(w)
    if norm == 0 or dist == 0:
        return 0.0
    arg = geom.eps * math.sqrt(pair.d) * dist / norm
    return float(2 * std_normal_cdf(arg) - 1)


def existence_probability_latent(pair: LinearPair, geom: AttackGeometry) -> float:
    """P[consistent latent attack exists] for z ~ N(0, I_d/d), u ~ N(0, I_p/p).

    The attack perturbs the latent vector z orthogonally to the teacher.
    """
    if pair.features is None:
        raise ValueError("latent existence probability needs the feature matrix")
    theta = pair.weights
    p, d = theta.size, pair.d
    v = pair.features.T @ theta
    dist, _ = dual_norm_distance(pair.orthogonal_part(), pair.teacher, geom.q_dual)
    spread = math.sqrt(theta @ theta + (p / d) * (v @ v))
    if spread == 0 or dist == 0:
        return 0.0
    arg = math.sqrt(p) * geom.eps * dist / spread
    return float(2 * std_normal_cdf(arg) - 1)


def feature_matrix(p: int, d: int) -> np.ndarray:
    """p x d block map: sqrt(p/d) [I_d; 0] when p >= d, [I_p 0] otherwise."""
    f = np.zeros((p, d))
    k = min(p, d)
    f[np.arange(k), np.arange(k)] = math.sqrt(p / d) if p >= d else 1.0
    return f
