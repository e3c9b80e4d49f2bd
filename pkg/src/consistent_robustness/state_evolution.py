"""Self-consistent equations for robust ERM in the latent-variable model.

Model: z ~ N(0, I_d), u ~ N(0, I_p), x = F z + u, labels from the teacher
field nu = <w_star, z>/sqrt(d).  The model field is mu = <theta, x>/sqrt(p).
Training minimizes

    sum_i loss(y_i mu_i - r P^(1/s_dual)) + lam ||theta||^2,
    P = ||theta||_{s_dual}^{s_dual} / p.

Order parameters (all O(1)):
    m    field overlap E[nu mu] = w_star^T F^T theta / sqrt(d p)
    q_ov field variance E[mu^2] = theta^T (F F^T + I) theta / p
    V    susceptibility, P training-geometry norm,
    q_ell = theta^T F F^T theta / d,  q_f = ||theta||^2 / p,
so that q_ov = gamma * q_ell + q_f with gamma = d / p.

Whitening x splits the coordinates of theta into blocks.  Inside a block
every coordinate solves the same scalar elastic-net problem

    theta = argmin  Lambda/2 t^2 - rho t + lam t^2 + (P_hat/2) |t|,
    rho = s sqrt(q_hat) xi + c m_hat w,    Lambda = s^2 V_hat,

with xi, w ~ N(0, 1) independent (w is a teacher coordinate).  For
gamma <= 1 the first d coordinates see the teacher (s^2 = 1 + 1/gamma,
c = 1/gamma) and the remaining p - d do not (s = 1, c = 0); for gamma > 1
all p coordinates see the teacher (s^2 = 2, c = 1/sqrt(gamma)).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize

from . import asymptotic_metrics as am
from .losses import Loss, get_loss
from .special_math import GaussRule, std_normal_cdf, std_normal_pdf

__all__ = [
    "objective_value",
    "LatentModelConfig",
    "SolverSettings",
    "OverlapState",
    "Block",
    "NonConvergenceError",
    "Z0_channel",
    "dZ0_channel",
    "prox_shifted_loss",
    "prox_elastic_net",
    "f_out",
    "prior_blocks",
    "channel_update",
    "prior_update",
    "solve_fixed_point",
    "coordinate_components",
    "latent_metrics",
    "tune_hyperparameters",
]

log = logging.getLogger(__name__)

_HATS = ("m_hat", "q_hat", "V_hat", "P_hat")
_ORDER = ("m", "q_ov", "V", "P")


@dataclass(frozen=True)
class LatentModelConfig:
    """Problem instance.  ``gamma = d/p`` and ``psi = p/n`` satisfy gamma*alpha*psi = 1."""

    alpha: float
    gamma: float
    lam: float = 1e-3
    r: float = 0.0
    loss: str = "logistic"
    link: str = "sign"
    noise_var: float = 0.0
    q_att: float = 2.0
    s_dual: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ValueError("alpha and gamma must be positive")
        if self.lam < 0 or self.r < 0:
            raise ValueError("lam and r must be nonnegative")
        if self.link not in ("sign", "probit"):
            raise ValueError(f"unknown link {self.link!r}")
        if self.link == "sign" and self.noise_var != 0:
            raise ValueError("sign link is noiseless; use link='probit' for label noise")
        if self.s_dual != 1.0:
            raise ValueError("only s = inf training geometry (s_dual = 1) is supported")
        get_loss(self.loss)

    @classmethod
    def from_psi(cls, alpha: float, psi: float, **kw) -> "LatentModelConfig":
        return cls(alpha=alpha, gamma=1.0 / (alpha * psi), **kw)

    @property
    def psi(self) -> float:
        return 1.0 / (self.alpha * self.gamma)

    @property
    def samples_per_feature(self) -> float:
        """n / p."""
        return self.alpha * self.gamma


@dataclass(frozen=True)
class OverlapState:
    m: float = 0.1
    q_ov: float = 1.0
    V: float = 1.0
    P: float = 0.1
    m_hat: float = 0.0
    q_hat: float = 0.0
    V_hat: float = 0.0
    P_hat: float = 0.0
    q_ell: float = 0.0
    q_f: float = 0.0
    iterations: int = 0
    residual: float = math.inf
    converged: bool = False

    def order(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in _ORDER])

    def overlaps(self, noise_var: float = 0.0) -> am.OverlapPair:
        return am.OverlapPair(self.m, self.q_ov, self.q_ell, self.q_f, self.P, label_noise=noise_var)

    def record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SolverSettings:
    damping: float = 0.5
    tol: float = 1e-5
    max_iter: int = 5000
    init: OverlapState = field(default_factory=OverlapState)
    panels: int = 64
    order: int = 10

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, state: OverlapState, trace: list[float]):
        super().__init__(message)
        self.state = state
        self.trace = trace


# ---------------------------------------------------------------------------
# Channel
# ---------------------------------------------------------------------------


def Z0_channel(y, omega, V, noise_var: float = 0.0):
    """E_{z ~ N(omega, V)} P(y | z) for a sign (noise_var = 0) or probit link."""
    V = np.asarray(V, dtype=float)
    if np.any(V <= 0):
        raise ValueError("channel variance must be positive")
    return std_normal_cdf(np.asarray(y) * np.asarray(omega) / np.sqrt(V + noise_var))


def dZ0_channel(y, omega, V, noise_var: float = 0.0):
    """Derivative of Z0_channel with respect to omega."""
    s = np.sqrt(np.asarray(V, dtype=float) + noise_var)
    y = np.asarray(y, dtype=float)
    return y * std_normal_pdf(y * np.asarray(omega) / s) / s


def prox_shifted_loss(loss: str | Loss, y, omega, V, shift=0.0):
    """argmin_z loss(y z - shift) + (z - omega)^2 / (2 V)."""
    if np.any(np.asarray(V) <= 0):
        raise ValueError("prox step must be positive")
    return get_loss(loss).prox(y, omega, V, shift)


def f_out(loss: Loss, y, omega, V, shift):
    return (loss.prox(y, omega, V, shift) - omega) / V


def _df_out(loss: Loss, y, omega, V, shift):
    h = 1e-6 * np.maximum(1.0, np.abs(omega))
    return (f_out(loss, y, omega + h, V, shift) - f_out(loss, y, omega - h, V, shift)) / (2 * h)


def _training_shift(P: float, cfg: LatentModelConfig) -> float:
    return cfg.r * max(P, 0.0) ** (1.0 / cfg.s_dual)


def channel_update(state: OverlapState, cfg: LatentModelConfig, rule: GaussRule | None = None) -> tuple[float, float, float, float]:
    """Conjugate order parameters (m_hat, q_hat, V_hat, P_hat)."""
    loss = get_loss(cfg.loss)
    m, q, V = state.m, state.q_ov, state.V
    if V <= 0 or q <= 0:
        raise ValueError("state must have V > 0 and q_ov > 0")
    corr = m / math.sqrt(q)
    V0 = max(1.0 - m * m / q, 1e-14)
    shift = _training_shift(state.P, cfg)
    if rule is None:
        # y omega - shift = kink  <=>  xi = y (kink + shift) / sqrt(q).
        kinks = [y * (k + shift) / math.sqrt(q) for k in loss.kinks(V) for y in (1.0, -1.0)]
        rule = _channel_rule(corr, V0 + cfg.noise_var, kinks)
    xi = rule.nodes
    omega0 = corr * xi
    omega = math.sqrt(q) * xi
    a = cfg.samples_per_feature
    totals = np.zeros(4)
    for y in (1.0, -1.0):
        z0 = Z0_channel(y, omega0, V0, cfg.noise_var)
        dz0 = dZ0_channel(y, omega0, V0, cfg.noise_var)
        f = f_out(loss, y, omega, V, shift)
        df = _df_out(loss, y, omega, V, shift)
        totals += [rule.expect(dz0 * f), rule.expect(z0 * f * f), -rule.expect(z0 * df), rule.expect(z0 * y * f)]
    m_hat, q_hat, V_hat, yf = a * totals
    # d/dP of the Moreau envelope at the shifted margin gives y f_out times d(shift)/dP.
    P_hat = 2.0 * cfg.r * yf * (1.0 / cfg.s_dual) * max(state.P, 1e-300) ** (1.0 / cfg.s_dual - 1.0)
    return float(m_hat), float(q_hat), float(V_hat), float(P_hat)


def _channel_rule(corr: float, v_total: float, kinks=()) -> GaussRule:
    width = math.sqrt(v_total) / max(abs(corr), 1e-300)
    breaks = (0.0,)
    if width < 0.5:
        breaks = tuple(np.linspace(-12 * width, 12 * width, 25))
    breaks = breaks + tuple(kinks)
    return GaussRule(panels=64, order=10, breaks=breaks)


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------


def prox_elastic_net(v, Lambda, threshold, lam):
    """argmin_t Lambda/2 t^2 - v t + lam t^2 + threshold |t|."""
    Lambda = np.asarray(Lambda, dtype=float)
    if np.any(Lambda <= 0):
        raise ValueError("Lambda must be positive")
    v = np.asarray(v, dtype=float)
    return np.sign(v / Lambda) * np.maximum(np.abs(v / Lambda) - threshold / Lambda, 0.0) / (2 * lam / Lambda + 1)


@dataclass(frozen=True)
class Block:
    """Fraction of the p coordinates, whitening scale s^2 and teacher coupling c."""

    fraction: float
    scale2: float
    coupling: float


def prior_blocks(gamma: float, branch: str | None = None) -> list[Block]:
    if branch is None:
        branch = "small" if gamma <= 1 else "large"
    if branch == "small":
        return [Block(gamma, 1 + 1 / gamma, 1 / gamma), Block(1 - gamma, 1.0, 0.0)]
    if branch == "large":
        return [Block(1.0, 2.0, 1 / math.sqrt(gamma))]
    raise ValueError(f"unknown branch {branch!r}")


@dataclass(frozen=True)
class _BlockMoments:
    theta2: float
    abs_theta: float
    slope: float
    teacher_corr: float


def _block_moments(block: Block, hats, lam: float) -> _BlockMoments:
    """Closed-form Gaussian moments of the soft-threshold estimator in one block."""
    m_hat, q_hat, V_hat, P_hat = hats
    b2 = block.scale2 * q_hat
    c = block.coupling * m_hat
    sigma2 = b2 + c * c
    denom = block.scale2 * V_hat + 2 * lam
    thr = P_hat / 2
    if sigma2 == 0.0:
        return _BlockMoments(0.0, 0.0, 0.0, 0.0)
    sigma = math.sqrt(sigma2)
    t = thr / sigma
    tail = float(std_normal_cdf(-t))
    dens = float(std_normal_pdf(t))
    soft2 = sigma2 * 2 * ((1 + t * t) * tail - t * dens)
    soft1 = 2 * sigma * (dens - t * tail)
    active = 2 * tail
    return _BlockMoments(soft2 / denom**2, soft1 / denom, active / denom, c * active / denom)


def prior_update(hats, cfg: LatentModelConfig, branch: str | None = None) -> dict:
    """Order parameters (m, q_ov, V, P, q_ell, q_f) from the conjugates."""
    m_hat, q_hat, V_hat, P_hat = hats
    if q_hat < 0 or V_hat <= 0:
        raise ValueError(f"need q_hat >= 0 and V_hat > 0, got {q_hat}, {V_hat}")
    out = dict.fromkeys(("m", "q_ov", "V", "P", "q_ell", "q_f"), 0.0)
    for blk in prior_blocks(cfg.gamma, branch):
        if blk.fraction == 0:
            continue
        mo = _block_moments(blk, hats, cfg.lam)
        out["m"] += blk.fraction * blk.coupling * mo.teacher_corr
        out["q_ov"] += blk.fraction * blk.scale2 * mo.theta2
        out["V"] += blk.fraction * blk.scale2 * mo.slope
        out["P"] += blk.fraction * mo.abs_theta
        out["q_f"] += blk.fraction * mo.theta2
        out["q_ell"] += blk.fraction * (blk.scale2 - 1) * mo.theta2 / cfg.gamma
    return out


# ---------------------------------------------------------------------------
# Fixed point
# ---------------------------------------------------------------------------


def _contraction(trace: list[float], window: int = 10) -> float:
    """Geometric decay rate of the residual over the last ``window`` steps, capped below 1."""
    k = min(window, len(trace) - 1)
    if k < 1 or trace[-1 - k] <= 0:
        return 0.0
    rate = (trace[-1] / trace[-1 - k]) ** (1.0 / k)
    return float(min(max(rate, 0.0), 0.999))


def solve_fixed_point(cfg: LatentModelConfig, settings: SolverSettings = SolverSettings(), branch: str | None = None) -> OverlapState:
    """Damped iteration of channel and prior updates until the residual drops below tol.

    The residual is the undamped change max |F(x) - x| over (m, q_ov, V, P).
    Iteration stops once the residual is below tol and so is the distance
    still to travel, damping * residual / (1 - rate), with the contraction
    rate estimated from the last residuals.
    ``branch`` forces the prior equations for gamma <= 1 ("small") or
    gamma > 1 ("large"); both are valid at gamma = 1.
    """
    state = settings.init
    trace: list[float] = []
    mu = settings.damping
    for it in range(1, settings.max_iter + 1):
        hats = channel_update(state, cfg)
        new = prior_update(hats, cfg, branch)
        new_vec = np.array([new[k] for k in _ORDER])
        old_vec = state.order()
        if not np.all(np.isfinite(new_vec)):
            raise NonConvergenceError("non-finite update", state, trace)
        resid = float(np.max(np.abs(new_vec - old_vec)))
        trace.append(resid)
        if resid < settings.tol and mu * resid / (1.0 - _contraction(trace)) < settings.tol:
            return OverlapState(**new, **dict(zip(_HATS, hats)), iterations=it, residual=resid, converged=True)
        mixed = mu * new_vec + (1 - mu) * old_vec
        mixed[1] = max(mixed[1], mixed[0] ** 2 * (1 + 1e-12))
        state = OverlapState(
            *mixed, *hats, q_ell=mu * new["q_ell"] + (1 - mu) * state.q_ell,
            q_f=mu * new["q_f"] + (1 - mu) * state.q_f, iterations=it, residual=resid,
        )
    raise NonConvergenceError(f"no convergence after {settings.max_iter} iterations (residual {trace[-1]:.3g})", state, trace)


# ---------------------------------------------------------------------------
# Metrics from a fixed point
# ---------------------------------------------------------------------------


def coordinate_components(state: OverlapState, cfg: LatentModelConfig, form: str = "latent") -> list[am.CoordinateComponent]:
    """Law of the coordinates an input attack is scored against.

    ``form="latent"`` describes the d coordinates of sqrt(gamma) F^T theta,
    which is what a perturbation of z acts on.  ``form="block_sum"`` instead
    averages over the p coordinates of theta and adds a separate teacher-only
    term per block; it is kept for comparison only.
    """
    hats = (state.m_hat, state.q_hat, state.V_hat, state.P_hat)
    comps = []
    blocks = prior_blocks(cfg.gamma)
    for blk in blocks:
        b = math.sqrt(blk.scale2 * hats[1])
        c = blk.coupling * hats[0]
        Lam = blk.scale2 * hats[2]
        if form == "block_sum":
            comps.append(am.CoordinateComponent(blk.fraction, 1.0, b, c, Lam))
            comps.append(am.CoordinateComponent(blk.fraction, 0.0))
        elif form == "latent":
            if blk.coupling == 0:
                continue
            if cfg.gamma <= 1:
                comps.append(am.CoordinateComponent(1.0, 1.0, b, c, Lam))
            else:
                comps.append(am.CoordinateComponent(1 / cfg.gamma, math.sqrt(cfg.gamma), b, c, Lam))
                comps.append(am.CoordinateComponent(1 - 1 / cfg.gamma, 0.0))
        else:
            raise ValueError(f"unknown form {form!r}")
    return comps


def latent_metrics(state: OverlapState, cfg: LatentModelConfig, eps_tilde: Sequence[float], q_att: float | None = None, form: str = "latent") -> am.MetricsReport:
    """Asymptotic metrics; eps_tilde = eps * d^(1/q_dual - 1/2) for latent perturbations."""
    if not state.converged:
        raise ValueError("state is not a converged fixed point")
    q_att = cfg.q_att if q_att is None else q_att
    comps = coordinate_components(state, cfg, form)
    rep = am.metrics_latent(state.overlaps(cfg.noise_var), comps, q_att, eps_tilde, cfg.lam, state.P_hat / 2)
    rep.meta.update({"alpha": cfg.alpha, "gamma": cfg.gamma, "lam": cfg.lam, "r": cfg.r})
    return rep


_OBJECTIVES = ("clean", "rob", "rob_cns", "bnd_cns")


def objective_value(rep: am.MetricsReport, objective: str) -> float:
    if objective == "clean":
        return rep.clean
    return float(getattr(rep, objective)[0])


_PENALTY = 10.0


@dataclass
class TuneResult:
    lam: float
    r: float
    value: float
    state: OverlapState | None
    trace: list = field(default_factory=list)


def tune_hyperparameters(
    cfg: LatentModelConfig,
    objective: str = "clean",
    tunables: Sequence[str] = ("lam",),
    eps_tilde: float = 0.0,
    settings: SolverSettings = SolverSettings(),
    lam_bounds: tuple[float, float] = (1e-5, 1e2),
    r_bounds: tuple[float, float] = (1e-3, 1e3),
    grid_points: int = 13,
    restarts: int = 3,
) -> TuneResult:
    """Minimize one asymptotic metric over log(lam) and/or log(r).

    A cold-started log grid locates candidate basins; bounded Brent (one
    tunable) or Nelder-Mead (two) then refines the best ``restarts`` of them
    with warm starts.  The best point
    ever evaluated is returned, so the result never exceeds any probed value.
    """
    if objective not in _OBJECTIVES:
        raise ValueError(f"objective must be one of {_OBJECTIVES}")
    tunables = tuple(tunables)
    if not tunables or set(tunables) - {"lam", "r"}:
        raise ValueError("tunables must be a nonempty subset of {'lam', 'r'}")
    trace: list = []
    best: dict = {"value": math.inf, "params": None, "state": None}
    warm = {"state": settings.init}

    def evaluate(logs, cold=False):
        params = {t: float(v) for t, v in zip(tunables, np.exp(logs))}
        trial = replace(cfg, **params)
        init = settings.init if cold else warm["state"]
        try:
            st = solve_fixed_point(trial, replace(settings, init=init))
            val = objective_value(latent_metrics(st, trial, [eps_tilde]), objective)
        except (NonConvergenceError, ValueError, FloatingPointError) as exc:
            trace.append((params, math.inf, str(exc)))
            # Finite stand-in for +inf: metrics lie in [0, 1] and Nelder-Mead cannot compare infinities.
            return _PENALTY
        trace.append((params, val, "ok"))
        if val < best["value"]:
            best.update(value=val, params=params, state=st)
        warm["state"] = replace(st, converged=False)
        return val

    bounds = {"lam": lam_bounds, "r": r_bounds}
    logb = [tuple(map(math.log, bounds[t])) for t in tunables]
    lower = np.array([a for a, _ in logb])
    upper = np.array([b for _, b in logb])
    axes = [np.linspace(a, b, grid_points) for a, b in logb]
    grid = [np.array(pt) for pt in itertools.product(*axes)]
    vals = np.array([evaluate(pt, cold=True) for pt in grid])
    if vals.min() >= _PENALTY:
        raise NonConvergenceError("no grid point converged", None, [v for _, v, _ in trace])
    steps = (upper - lower) / (grid_points - 1)
    for idx in np.argsort(vals, kind="stable")[:restarts]:
        start = grid[idx]
        warm["state"] = settings.init
        evaluate(start)
        if len(tunables) == 1:
            lo, hi = max(start[0] - steps[0], lower[0]), min(start[0] + steps[0], upper[0])
            optimize.minimize_scalar(lambda t: evaluate([t]), bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
            continue
        eye = np.eye(len(start))
        simplex = [start] + [
            np.clip(start + steps[k] * eye[k] * (1 if start[k] < upper[k] else -1), lower, upper) for k in range(len(start))
        ]
        optimize.minimize(
            lambda v: evaluate(np.clip(v, lower, upper)),
            start, method="Nelder-Mead",
            options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 300, "initial_simplex": np.array(simplex)},
        )
    params = best["params"]
    return TuneResult(params.get("lam", cfg.lam), params.get("r", cfg.r), best["value"], best["state"], trace)
