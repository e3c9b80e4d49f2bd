"""Finite-dimensional simulator: data generation, robust ERM training,
overlap measurement and empirical error metrics.

Two data models share one trainer:

* well-specified: x ~ N(0, I_d / d), model field <w, x>;
* latent: z ~ N(0, I_d), u ~ N(0, I_p), x = F z + u, model field <theta, x>/sqrt(p).

In both cases labels come from a teacher field of unit variance and the
trainer minimizes

    sum_i loss(y_i * field_i - r * P(w)^(1/s_dual)) + lam ||w||^2,
    P(w) = ||w||_{s_dual}^{s_dual} / dim.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from . import asymptotic_metrics as am
from .geometry import AttackGeometry, dual_exponent, dual_norm_distance, feature_matrix, lp_norm
from .losses import get_loss

__all__ = [
    "Dataset",
    "TrainConfig",
    "TrainedPredictor",
    "TrainingError",
    "make_rng",
    "sample_teacher",
    "generate_wellspec",
    "generate_latent",
    "train_robust_erm",
    "robust_objective",
    "worst_case_margin_shift",
    "shift_factors",
    "measure_overlaps",
    "empirical_metrics",
    "save_dataset",
    "load_dataset",
]

log = logging.getLogger(__name__)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by a 64-bit seed and optional sub-keys."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, keys)])))


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    teacher: np.ndarray
    kind: str
    seed: int
    features: np.ndarray | None = None
    latent: np.ndarray | None = None
    noise_var: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.teacher.size

    @property
    def field_scale(self) -> float:
        return 1.0 if self.kind == "wellspec" else 1.0 / math.sqrt(self.dim)


def sample_teacher(d: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal(d)
    return g * (math.sqrt(d) / np.linalg.norm(g))


def _labels(field_values: np.ndarray, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    if noise_var > 0:
        field_values = field_values + math.sqrt(noise_var) * rng.standard_normal(field_values.shape)
    y = np.sign(field_values)
    y[y == 0] = 1.0
    return y


def generate_wellspec(d: int, n: int, noise_var: float = 0.0, seed: int = 0, teacher: np.ndarray | None = None) -> Dataset:
    rng = make_rng(seed, 0)
    w = sample_teacher(d, rng) if teacher is None else np.asarray(teacher, dtype=float)
    X = rng.standard_normal((n, d)) / math.sqrt(d)
    return Dataset(X, _labels(X @ w, noise_var, rng), w, "wellspec", seed, noise_var=noise_var)


def generate_latent(d: int, p: int, n: int, noise_var: float = 0.0, seed: int = 0, teacher: np.ndarray | None = None) -> Dataset:
    rng = make_rng(seed, 1)
    w = sample_teacher(d, rng) if teacher is None else np.asarray(teacher, dtype=float)
    F = feature_matrix(p, d)
    Z = rng.standard_normal((n, d))
    X = Z @ F.T + rng.standard_normal((n, p))
    y = _labels(Z @ w / math.sqrt(d), noise_var, rng)
    return Dataset(X, y, w, "latent", seed, features=F, latent=Z, noise_var=noise_var)


def save_dataset(path, data: Dataset) -> None:
    extras = {k: v for k, v in (("features", data.features), ("latent", data.latent)) if v is not None}
    np.savez(path, X=data.X, y=data.y, teacher=data.teacher, kind=data.kind, seed=data.seed, noise_var=data.noise_var, **extras)


def load_dataset(path) -> Dataset:
    with np.load(path) as f:
        return Dataset(
            f["X"], f["y"], f["teacher"], str(f["kind"]), int(f["seed"]),
            f["features"] if "features" in f else None,
            f["latent"] if "latent" in f else None,
            float(f["noise_var"]),
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-3
    r: float = 0.0
    s_dual: float = 1.0
    loss: str = "logistic"
    tol: float = 1e-8
    max_newton: int = 200


@dataclass
class TrainedPredictor:
    weights: np.ndarray
    overlaps: am.OverlapPair
    objective: float
    grad_norm: float
    iterations: int
    extras: dict = field(default_factory=dict)


class TrainingError(RuntimeError):
    pass


def _norm_term(w: np.ndarray, s_dual: float, dim: int, smooth: float, order: int = 2):
    """Smoothed P(w)^(1/s_dual) with its gradient and Hessian (dense or diagonal)."""
    if s_dual == 1:
        root = np.sqrt(w * w + smooth * smooth)
        h = float(np.sum(root - smooth)) / dim
        if order == 0:
            return h, None, None
        return h, w / root / dim, ("diag", smooth * smooth / root**3 / dim)
    if s_dual == 2:
        root = math.sqrt(float(w @ w) + smooth * smooth)
        if order == 0:
            return root / math.sqrt(dim), None, None
        g = w / root / math.sqrt(dim)
        hess = (np.eye(w.size) - np.outer(w, w) / root**2) / root / math.sqrt(dim)
        return root / math.sqrt(dim), g, ("dense", hess)
    raise ValueError("training geometry supports s_dual in {1, 2}")


def robust_objective(w, A: np.ndarray, cfg: TrainConfig, smooth: float = 0.0, width: float = 0.0, order: int = 0):
    """Objective (and optionally gradient / Hessian) with A = field_scale * diag(y) X."""
    loss = get_loss(cfg.loss)
    dim = w.size
    if cfg.r > 0:
        h, gh, hh = _norm_term(w, cfg.s_dual, dim, smooth, order)
    else:
        h, gh, hh = 0.0, None, None
    u = A @ w - cfg.r * h
    if width > 0 or order > 0:
        val, d1, d2 = loss.smoothed(u, width) if width > 0 else (loss.value(u), *_exact_derivs(loss, u))
    else:
        val = loss.value(u)
    obj = float(np.sum(val) + cfg.lam * w @ w)
    if order == 0:
        return obj
    grad = A.T @ d1 + 2 * cfg.lam * w
    if cfg.r > 0:
        grad -= cfg.r * float(np.sum(d1)) * gh
    if order == 1:
        return obj, grad
    B = A - cfg.r * gh[None, :] if cfg.r > 0 else A
    H = (B.T * d2) @ B
    H[np.diag_indices_from(H)] += 2 * cfg.lam
    if cfg.r > 0:
        coef = -cfg.r * float(np.sum(d1))
        if hh[0] == "diag":
            H[np.diag_indices_from(H)] += coef * hh[1]
        else:
            H += coef * hh[1]
    return obj, grad, H


def _exact_derivs(loss, u):
    return loss.derivative(u), loss.second(u)


def _newton(w, A, cfg, smooth, width, tol):
    obj, g, H = robust_objective(w, A, cfg, smooth, width, order=2)
    for it in range(1, cfg.max_newton + 1):
        try:
            step = linalg.solve(H, -g, assume_a="pos", check_finite=False)
        except linalg.LinAlgError:
            step = -g / np.max(np.diag(H))
        slope = float(g @ step)
        t = 1.0
        while True:
            trial = w + t * step
            new = robust_objective(trial, A, cfg, smooth, width)
            if new <= obj + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        w = trial
        obj, g, H = robust_objective(w, A, cfg, smooth, width, order=2)
        if np.linalg.norm(g) <= tol * max(1.0, abs(obj)):
            return w, obj, g, it
    return w, obj, g, cfg.max_newton


def train_robust_erm(data: Dataset, cfg: TrainConfig = TrainConfig()) -> TrainedPredictor:
    """Minimize the reduced robust risk by damped Newton steps.

    A nonsmooth training norm (s_dual = 1) or loss (hinge) is handled by a
    smoothing continuation whose final smoothing parameter is 1e-8 (norm)
    or 1e-5 (hinge).
    """
    if cfg.lam == 0 and data.n < data.dim:
        warnings.warn("lam = 0 with n < dim: the minimizer may not be unique", RuntimeWarning, stacklevel=2)
    A = data.field_scale * data.y[:, None] * data.X
    w = np.zeros(data.dim)
    smooths = [0.0]
    if cfg.r > 0:
        smooths = [10.0 ** -k for k in range(1, 9)]
    widths = [0.0]
    if cfg.loss == "hinge":
        widths = [10.0 ** -k for k in range(1, 6)]
    total = 0
    for width in widths:
        for smooth in smooths:
            w, obj, g, its = _newton(w, A, cfg, smooth, width, cfg.tol)
            total += its
    gnorm = float(np.linalg.norm(g))
    if gnorm > cfg.tol * max(1.0, abs(obj)) * 10:
        raise TrainingError(f"stationarity not reached: |grad| = {gnorm:.3g}, objective {obj:.6g}")
    zero_obj = robust_objective(np.zeros(data.dim), A, cfg)
    true_obj = robust_objective(w, A, cfg)
    if true_obj > zero_obj:
        raise TrainingError("returned weights are worse than the zero vector")
    ov, extras = measure_overlaps(w, data, cfg.s_dual)
    return TrainedPredictor(w, ov, true_obj, gnorm, total, extras)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------


def measure_overlaps(weights: np.ndarray, data: Dataset, s_dual: float = 1.0) -> tuple[am.OverlapPair, dict]:
    """Field overlaps (m, q_ov) plus, for the latent model, q_ell, q_f and P.

    Latent fields are nu = <w_star, z>/sqrt(d), mu = <theta, x>/sqrt(p), so
    m = w_star^T F^T theta / sqrt(d p) and q_ov = gamma q_ell + q_f.
    ``extras['m_latent']`` is w_star^T F^T theta / d.
    """
    w = np.asarray(weights, dtype=float)
    t = data.teacher
    d = t.size
    P = lp_norm(w, s_dual) ** s_dual / w.size if w.any() else 0.0
    if data.kind == "wellspec":
        m, q = float(t @ w) / d, float(w @ w) / d
        return _pair(m, q, None, None, P, data.noise_var), {"P": P}
    p = w.size
    v = data.features.T @ w
    q_ell = float(v @ v) / d
    q_f = float(w @ w) / p
    m = float(t @ v) / math.sqrt(d * p)
    q = (d / p) * q_ell + q_f
    extras = {"m_latent": float(t @ v) / d, "q_ell": q_ell, "q_f": q_f, "P": P}
    return _pair(m, q, q_ell, q_f, P, data.noise_var), extras


def _pair(m, q, q_ell, q_f, P, noise):
    if q <= 0:
        # Zero predictor: represent by a tiny isotropic variance so metrics stay defined.
        q = 1e-300
        m = 0.0
    return am.OverlapPair(m, max(q, m * m), q_ell, q_f, P, label_noise=noise)


def worst_case_margin_shift(w, teacher, geom: AttackGeometry, consistent: bool = True, field_scale: float | None = None) -> float:
    """Largest decrease of the signed field achievable by an attack of radius eps.

    ``field_scale`` multiplies inner products to form the field; it
    defaults to 1/sqrt(dim).
    """
    w = np.asarray(w, dtype=float)
    scale = 1.0 / math.sqrt(w.size) if field_scale is None else field_scale
    if consistent:
        dist, _ = dual_norm_distance(w, teacher, geom.q_dual)
    else:
        dist = lp_norm(w, geom.q_dual)
    return geom.eps * scale * dist


def shift_factors(weights, data: Dataset, q_att: float) -> tuple[float, float]:
    """Shift per unit of rescaled radius, (consistent, unconstrained).

    Well-specified: eps = eps_tilde * d^(-1/q_dual).  Latent: the attack acts
    on z ~ N(0, I_d) and eps = eps_tilde * d^(1/2 - 1/q_dual).
    """
    qd = dual_exponent(q_att)
    d = data.d
    if data.kind == "wellspec":
        geom = AttackGeometry(q_att, d ** (-1.0 / qd))
        v, scale = np.asarray(weights, dtype=float), 1.0
    else:
        geom = AttackGeometry(q_att, d ** (0.5 - 1.0 / qd))
        v, scale = data.features.T @ weights, 1.0 / math.sqrt(data.dim)
    return (
        worst_case_margin_shift(v, data.teacher, geom, True, scale),
        worst_case_margin_shift(v, data.teacher, geom, False, scale),
    )


def empirical_metrics(
    pred: TrainedPredictor,
    data: Dataset,
    q_att: float,
    eps_tilde: Sequence[float],
    mode: str = "plugin",
    n_test: int = 100_000,
    seed: int = 0,
) -> am.MetricsReport:
    """Finite-d metrics of a trained predictor on fresh data from the same model."""
    cns, inc = shift_factors(pred.weights, data, q_att)
    eps = np.asarray(eps_tilde, dtype=float)
    meta = {"q_att": q_att, "model": data.kind, "seed": data.seed}
    if mode == "plugin":
        return am.metrics_from_factors(pred.overlaps, eps, cns, inc, "empirical-plugin", meta)
    if mode != "montecarlo":
        raise ValueError(f"unknown mode {mode!r}")
    rng = make_rng(seed, 2)
    margin = _fresh_margins(pred.weights, data, n_test, rng)
    rob = np.array([np.mean(margin < e * inc) for e in eps])
    rob_cns = np.array([np.mean(margin < e * cns) for e in eps])
    bnd = np.array([np.mean((margin >= 0) & (margin < e * cns)) for e in eps])
    meta.update({"n_test": n_test, "factor_cns": cns, "factor_inc": inc})
    return am.MetricsReport(eps, float(np.mean(margin < 0)), rob, rob_cns, bnd, "empirical-montecarlo", meta)


def _fresh_margins(w, data: Dataset, n_test: int, rng: np.random.Generator) -> np.ndarray:
    """Signed fields y * mu on fresh samples, generated in chunks."""
    out = []
    d = data.d
    left = n_test
    while left > 0:
        k = min(left, 20_000)
        if data.kind == "wellspec":
            X = rng.standard_normal((k, d)) / math.sqrt(d)
            mu, nu = X @ w, X @ data.teacher
        else:
            Z = rng.standard_normal((k, d))
            X = Z @ data.features.T + rng.standard_normal((k, data.dim))
            mu, nu = X @ w / math.sqrt(data.dim), Z @ data.teacher / math.sqrt(d)
        out.append(_labels(nu, data.noise_var, rng) * mu)
        left -= k
    return np.concatenate(out)
