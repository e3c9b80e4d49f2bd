"""Command-line experiments: existence probabilities, asymptotic sweeps,
finite-d simulations, hyperparameter tuning and theory/simulation comparison.

Usage::

    python3 -m consistent_robustness asymptotic --set axis=alpha --set grid=0.5,1,2
    python3 -m consistent_robustness simulate --config sweep.ini --out sim.csv --seed 7

Configuration is an INI file.  Keys in ``[DEFAULT]`` apply to every
subcommand and each subcommand reads its own section; ``--set key=value``
overrides both.  List-valued keys take comma-separated values.

Exit codes: 0 success, 1 some rows failed (or output could not be
written), 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import asymptotic_metrics as am
from . import geometry as geo
from . import simulation as sim
from . import state_evolution as se

SCHEMA_VERSION = 1
COMMANDS = ("existence", "asymptotic", "simulate", "tune", "compare")
AXES = ("alpha", "gamma", "psi", "eps", "lam", "r", "m", "q_ov", "d")


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    model: str = "latent"
    axis: str = "alpha"
    grid: tuple[float, ...] = (1.0,)
    alpha: float = 1.0
    gamma: float = 0.5
    lam: float = 1e-3
    r: float = 0.0
    loss: str = "logistic"
    link: str = "sign"
    noise_var: float = 0.0
    q_att: float = 2.0
    s_dual: float = 1.0
    eps_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    repetitions: int = 10
    d: int = 500
    seed: int = 0
    tol: float = 1e-5
    damping: float = 0.5
    max_iter: int = 5000
    metric_mode: str = "plugin"
    n_test: int = 100_000
    m: float = 0.5
    q_ov: float = 1.0
    n_samples: int = 1000
    objective: str = "rob"
    tunables: tuple[str, ...] = ("lam", "r")
    form: str = "latent"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.model not in ("latent", "wellspec"):
            raise ConfigError(f"model must be 'latent' or 'wellspec', got {self.model!r}")
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}, got {self.axis!r}")
        for name in ("grid", "eps_grid"):
            g = getattr(self, name)
            if not g:
                raise ConfigError(f"{name} must be nonempty")
            if any(b < a for a, b in zip(g, g[1:])):
                raise ConfigError(f"{name} must be sorted ascending")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.metric_mode not in ("plugin", "montecarlo"):
            raise ConfigError("metric_mode must be 'plugin' or 'montecarlo'")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.model == "wellspec" and self.command in ("tune", "compare"):
            raise ConfigError(f"{self.command} needs the latent-model state evolution; set model = latent")
        if self.command == "existence" and self.axis not in ("eps", "m", "d"):
            raise ConfigError("existence sweeps axis eps, m or d")

    def point(self, value: float) -> "ExperimentConfig":
        """Copy with the sweep axis set to ``value`` (psi is converted to gamma)."""
        if self.axis == "psi":
            return replace(self, gamma=1.0 / (self.alpha * value))
        if self.axis == "eps":
            return replace(self, eps_grid=(value,))
        if self.axis == "d":
            return replace(self, d=int(value))
        return replace(self, **{self.axis: value})

    def latent_config(self) -> se.LatentModelConfig:
        return se.LatentModelConfig(
            alpha=self.alpha, gamma=self.gamma, lam=self.lam, r=self.r, loss=self.loss,
            link=self.link, noise_var=self.noise_var, q_att=self.q_att, s_dual=self.s_dual,
        )

    def solver_settings(self) -> se.SolverSettings:
        return se.SolverSettings(damping=self.damping, tol=self.tol, max_iter=self.max_iter)

    def echo(self) -> dict:
        """Parameter columns written on every row."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else v
        out["psi"] = 1.0 / (self.alpha * self.gamma)
        return out


_TUPLE_FIELDS = {f.name: f for f in fields(ExperimentConfig) if "tuple" in str(f.type)}


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind = str(kinds[name])
    try:
        if name in _TUPLE_FIELDS:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(items) if "str" in kind else tuple(float(s) for s in items)
        if kind == "int":
            return int(float(raw)) if name != "seed" else int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def load_config(command: str, path: str | None = None, overrides: Sequence[str] = (), seed: int | None = None) -> ExperimentConfig:
    """Build the configuration for one subcommand from file, overrides and flags."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        section = parser[command] if parser.has_section(command) else parser.defaults()
        values.update({k: _coerce(k, v) for k, v in section.items()})
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        values[key.strip()] = _coerce(key.strip(), raw)
    if seed is not None:
        values["seed"] = seed
    values.pop("command", None)
    try:
        return ExperimentConfig(command=command, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Per-point workers (module level so that worker processes can pickle them)
# ---------------------------------------------------------------------------


def _sub_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def _row(cfg: ExperimentConfig, status: str = "ok", **cols) -> dict:
    row = {"schema_version": SCHEMA_VERSION, "status": status}
    row.update(cfg.echo())
    row.update(cols)
    return row


def _existence_point(cfg: ExperimentConfig, index: int) -> list[dict]:
    """Theory vs sampled frequency of consistent-attack existence at one radius grid."""
    rng = sim.make_rng(_sub_seed(cfg.seed, index), 3)
    d = cfg.d
    teacher = np.zeros(d)
    teacher[0] = math.sqrt(d)
    xi = rng.standard_normal(d)
    xi[0] = 0.0
    w_hat = math.sqrt(d) * (cfg.m * np.eye(d)[0] + math.sqrt(max(1 - cfg.m**2, 0.0)) * xi / np.linalg.norm(xi))
    if cfg.model == "wellspec":
        pair = geo.LinearPair(teacher, w_hat)
        p = d
    else:
        p = max(int(round(d / cfg.gamma)), 1)
        F = geo.feature_matrix(p, d)
        pair = geo.LinearPair(teacher, F @ w_hat + rng.standard_normal(p), F)
    rows = []
    for eps in cfg.eps_grid:
        g = geo.AttackGeometry(cfg.q_att, eps)
        if cfg.model == "wellspec":
            theory = geo.existence_probability_wellspec(pair, g)
            X = rng.standard_normal((cfg.n_samples, d)) / math.sqrt(d)
        else:
            theory = geo.existence_probability_latent(pair, g)
            Z = rng.standard_normal((cfg.n_samples, d)) / math.sqrt(d)
            X = Z @ pair.features.T + rng.standard_normal((cfg.n_samples, p)) / math.sqrt(p)
        hits = np.array([geo.consistent_attack_exists(pair, x, g) for x in X])
        freq = float(hits.mean())
        rows.append(_row(cfg, eps=eps, p=p, p_theory=theory, p_montecarlo=freq,
                         std_err=math.sqrt(max(theory * (1 - theory), 0.0) / cfg.n_samples)))
    return rows


def _asymptotic_point(cfg: ExperimentConfig, index: int) -> list[dict]:
    if cfg.model == "wellspec":
        try:
            rep = am.metrics_wellspec(am.OverlapPair(cfg.m, cfg.q_ov, label_noise=cfg.noise_var), cfg.q_att, cfg.eps_grid)
        except ValueError as exc:
            return [_row(cfg, "invalid", error=str(exc))]
        return [_row(cfg, **r, factor_cns=rep.meta["factor_cns"], factor_inc=rep.meta["factor_inc"]) for r in rep.rows()]
    lc = cfg.latent_config()
    try:
        st = se.solve_fixed_point(lc, cfg.solver_settings())
    except se.NonConvergenceError as exc:
        return [_row(cfg, "nonconverged", error=str(exc), **exc.state.record())]
    rep = se.latent_metrics(st, lc, cfg.eps_grid, cfg.q_att, form=cfg.form)
    extra = {"factor_cns": rep.meta["factor_cns"], "factor_inc": rep.meta["factor_inc"]}
    return [_row(cfg, **st.record(), **extra, **r) for r in rep.rows()]


def _simulate_point(cfg: ExperimentConfig, index: int) -> list[dict]:
    rows = []
    d = cfg.d
    n = max(int(round(cfg.alpha * d)), 1)
    p = d if cfg.model == "wellspec" else max(int(round(d / cfg.gamma)), 1)
    tcfg = sim.TrainConfig(lam=cfg.lam, r=cfg.r, s_dual=cfg.s_dual, loss=cfg.loss)
    for rep_id in range(cfg.repetitions):
        seed = _sub_seed(cfg.seed, index, rep_id)
        if cfg.model == "wellspec":
            data = sim.generate_wellspec(d, n, cfg.noise_var, seed)
        else:
            data = sim.generate_latent(d, p, n, cfg.noise_var, seed)
        try:
            pred = sim.train_robust_erm(data, tcfg)
        except sim.TrainingError as exc:
            rows.append(_row(cfg, "train_failed", repetition=rep_id, data_seed=seed, error=str(exc)))
            continue
        rep = sim.empirical_metrics(pred, data, cfg.q_att, cfg.eps_grid, cfg.metric_mode, cfg.n_test, seed)
        ov = pred.overlaps
        base = {"repetition": rep_id, "data_seed": seed, "n": n, "p": p, "m": ov.m, "q_ov": ov.q_ov,
                "q_ell": ov.q_ell, "q_f": ov.q_f, "P": ov.P, "grad_norm": pred.grad_norm,
                "factor_cns": rep.meta["factor_cns"], "factor_inc": rep.meta["factor_inc"]}
        rows.extend(_row(cfg, **base, **r) for r in rep.rows())
    return rows + _aggregate(cfg, rows)


_AGG_COLS = ("m", "q_ov", "E_clean", "E_rob", "E_rob_cns", "E_bnd_cns")


def _aggregate(cfg: ExperimentConfig, rows: list[dict]) -> list[dict]:
    ok = [r for r in rows if r["status"] == "ok"]
    out = []
    for eps in cfg.eps_grid:
        sel = [r for r in ok if r["eps_tilde"] == eps]
        if not sel:
            continue
        cols = {"repetition": "aggregate", "n_ok": len(sel), "eps_tilde": eps}
        for c in _AGG_COLS:
            vals = np.array([r[c] for r in sel], dtype=float)
            cols[f"{c}_mean"] = float(vals.mean())
            cols[f"{c}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(_row(cfg, **cols))
    return out


def _tune_point(cfg: ExperimentConfig, index: int) -> list[dict]:
    lc = cfg.latent_config()
    eps = cfg.eps_grid[-1]
    try:
        base = se.solve_fixed_point(lc, cfg.solver_settings())
        untuned = se.objective_value(se.latent_metrics(base, lc, [eps]), cfg.objective)
    except se.NonConvergenceError:
        untuned = math.nan
    try:
        res = se.tune_hyperparameters(lc, cfg.objective, cfg.tunables, eps, cfg.solver_settings())
    except se.NonConvergenceError as exc:
        return [_row(cfg, "nonconverged", error=str(exc))]
    failures = sum(1 for _, v, _ in res.trace if not math.isfinite(v))
    tuned_cfg = replace(lc, lam=res.lam, r=res.r)
    rep = se.latent_metrics(res.state, tuned_cfg, cfg.eps_grid, cfg.q_att)
    cols = {"lam_star": res.lam, "r_star": res.r, "objective_value": res.value, "untuned_value": untuned,
            "trace_length": len(res.trace), "failed_probes": failures}
    return [_row(cfg, **cols, **res.state.record(), **r) for r in rep.rows()]


_PAIRED = ("m", "q_ov", "E_clean", "E_rob", "E_rob_cns", "E_bnd_cns")


def _compare_point(cfg: ExperimentConfig, index: int) -> list[dict]:
    theory = _asymptotic_point(replace(cfg, model="latent"), index)
    sims = [r for r in _simulate_point(replace(cfg, model="latent"), index) if r.get("repetition") == "aggregate"]
    by_eps = {r["eps_tilde"]: r for r in sims}
    out = []
    for t in theory:
        if t["status"] != "ok":
            out.append(t)
            continue
        s = by_eps.get(t["eps_tilde"])
        if s is None:
            out.append(_row(cfg, "train_failed", eps_tilde=t["eps_tilde"]))
            continue
        cols = {"eps_tilde": t["eps_tilde"], "n_ok": s["n_ok"]}
        for c in _PAIRED:
            mean, std = s[f"{c}_mean"], s[f"{c}_std"]
            se_ = std / math.sqrt(s["n_ok"])
            cols[f"{c}_theory"] = t[c]
            cols[f"{c}_sim_mean"] = mean
            cols[f"{c}_sim_std"] = std
            cols[f"{c}_z"] = abs(t[c] - mean) / se_ if se_ > 0 else (0.0 if t[c] == mean else math.inf)
        out.append(_row(cfg, **cols))
    return out


WORKERS: dict[str, Callable[[ExperimentConfig, int], list[dict]]] = {
    "existence": _existence_point,
    "asymptotic": _asymptotic_point,
    "simulate": _simulate_point,
    "tune": _tune_point,
    "compare": _compare_point,
}


def _call(args):
    command, cfg, index = args
    return WORKERS[command](cfg, index)


def run(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    """Evaluate every sweep point; rows come back in grid order."""
    jobs = [(cfg.command, cfg.point(v), i) for i, v in enumerate(cfg.grid)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_call, jobs))
    else:
        chunks = [_call(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


# Thin named entry points, one per subcommand.
def cmd_existence(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    return run(replace(cfg, command="existence"), threads)


def cmd_asymptotic(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    return run(replace(cfg, command="asymptotic"), threads)


def cmd_simulate(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    return run(replace(cfg, command="simulate"), threads)


def cmd_tune(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    return run(replace(cfg, command="tune"), threads)


def cmd_compare(cfg: ExperimentConfig, threads: int = 1) -> list[dict]:
    return run(replace(cfg, command="compare"), threads)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def to_csv(rows: list[dict]) -> str:
    header: list[str] = []
    for r in rows:
        header.extend(k for k in r if k not in header)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, restval="", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def to_json(rows: list[dict]) -> str:
    def clean(v):
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        return v

    return json.dumps([{k: clean(v) for k, v in r.items()} for r in rows], indent=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="consistent_robustness", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="INI file; section named after the command")
    parser.add_argument("--out", metavar="PATH", help="CSV output path (stdout if omitted)")
    parser.add_argument("--seed", type=int, metavar="U64", help="override the configured seed")
    parser.add_argument("--threads", type=int, default=1, metavar="N", help="worker processes for sweep points")
    parser.add_argument("--json", action="store_true", help="also write a JSON mirror (PATH.json, or stdout)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.set, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return 2
    rows = run(cfg, args.threads)
    text = to_csv(rows)
    status = 0 if all(r["status"] == "ok" for r in rows) else 1
    try:
        if args.out:
            Path(args.out).write_text(text)
            if args.json:
                Path(args.out).with_suffix(".json").write_text(to_json(rows))
        elif args.json:
            sys.stdout.write(to_json(rows) + "\n")
        else:
            sys.stdout.write(text)
    except OSError as exc:
        print(f"cannot write {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    return status
