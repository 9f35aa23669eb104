"""Command-line experiment runner.

Usage::

    python -m sparsechain run EXPERIMENT [key=value ...] [--config FILE]
                                         [--seed N] [--workers N] [--output DIR]

Settings come from, in increasing priority: the defaults table below, a YAML
config file, ``key=value`` overrides and the flags.  Every run writes its
artifacts (CSV/JSON), the resolved config and a manifest into a fresh
directory ``OUTPUT/EXPERIMENT-HASH``; the directory only appears once the
run has finished, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__

EXPERIMENTS = ("anderson-profile", "splitting-decay", "griffiths-gaps", "c-of-t",
               "exponent-fit", "decomposition-audit", "ed-crosscheck")

WORKERS_ENV = "SPARSECHAIN_WORKERS"

# Every physics and runtime default lives here.
DEFAULTS = {
    "experiment": None,
    "model": "classical",
    "disorder": {"L": None, "p": None, "seed": 0, "omega_low": 0.5, "omega_high": 1.5},
    "chain": {"g": 1.0, "g0": 0.3, "beta": 1.0},
    "quantum": {"J": 1.0, "g": 0.0, "mu": 1.0},
    "runtime": {
        "ensemble": None,        # per-experiment default when None
        "t_max": None,
        "dt": None,              # None: dt_max of the batch
        "n_points": 200,
        "L_list": None,
        "ell_list": None,
        "p_list": None,          # exponent-fit; p = 1 means every tau_x = 1
        "fit_window": None,
        "t_grid": None,
        "B_size": 64,
        "xi": None,              # None: fitted from the localization profile
        "workers": 1,
        "output_dir": "runs",
    },
}

ALIASES = {
    "L": "disorder.L", "p": "disorder.p", "seed": "disorder.seed",
    "omega_low": "disorder.omega_low", "omega_high": "disorder.omega_high",
    "g0": "chain.g0", "beta": "chain.beta", "J": "quantum.J", "mu": "quantum.mu",
    "N": "runtime.ensemble", "ensemble": "runtime.ensemble", "t_max": "runtime.t_max",
    "dt": "runtime.dt", "ell": "runtime.ell_list", "ell_list": "runtime.ell_list",
    "L_list": "runtime.L_list", "p_list": "runtime.p_list", "xi": "runtime.xi",
    "B_size": "runtime.B_size", "fit_window": "runtime.fit_window", "t_grid": "runtime.t_grid",
    "n_points": "runtime.n_points", "workers": "runtime.workers",
    "output_dir": "runtime.output_dir",
}

DISORDER_DEFAULTS = {  # (L, p) when not configured
    "anderson-profile": (64, 0.0),
    "splitting-decay": (64, 0.0),
    "griffiths-gaps": (128, 0.5),
    "c-of-t": (256, 0.0),
    "exponent-fit": (128, 0.2),
    "decomposition-audit": (64, 0.5),
    "ed-crosscheck": (6, 0.0),
}

PER_EXPERIMENT = {
    "anderson-profile": {"ensemble": 500},
    "splitting-decay": {"ensemble": 500, "ell_list": list(range(3, 15))},
    "griffiths-gaps": {"ensemble": 1000, "ell_list": [3]},
    "c-of-t": {"ensemble": 200, "t_max": 200.0},
    "exponent-fit": {"ensemble": 200, "t_max": 500.0, "p_list": [0.2, 1.0]},
    "decomposition-audit": {"t_max": 50.0, "dt": 0.01, "ell_list": [2]},
    "ed-crosscheck": {"ensemble": 3, "t_grid": [1.0, 5.0, 10.0]},
}


class ConfigError(ValueError):
    """The configuration does not match the schema."""


@dataclass
class ExperimentConfig:
    experiment: str
    model: str
    disorder: dict
    chain: dict
    quantum: dict
    runtime: dict
    raw: dict = field(repr=False, default_factory=dict)

    def disorder_spec(self, **overrides):
        from .disorder import DisorderSpec, OmegaLaw

        d = {**self.disorder, **overrides}
        return DisorderSpec(L=int(d["L"]), p=float(d["p"]),
                            omega_law=OmegaLaw(float(d["omega_low"]), float(d["omega_high"])),
                            seed=int(d["seed"]), model=self.model)

    def chain_params(self):
        from .classical_chain import ChainParams

        return ChainParams(**{k: float(v) for k, v in self.chain.items()})

    def quantum_params(self):
        from .fermion import QuantumParams

        return QuantumParams(**{k: float(v) for k, v in self.quantum.items()})

    @property
    def coupling(self) -> float:
        return float(self.chain["g0"] if self.model == "classical" else self.quantum["J"])

    def resolved(self) -> dict:
        return {"experiment": self.experiment, "model": self.model, "disorder": self.disorder,
                "chain": self.chain, "quantum": self.quantum, "runtime": self.runtime}

    def hash(self) -> str:
        rt = {k: v for k, v in self.runtime.items() if k not in ("workers", "output_dir")}
        blob = json.dumps({**self.resolved(), "runtime": rt}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _merge(base: dict, new: dict, path: str = ""):
    for k, v in new.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    if key == "g":
        raise ConfigError("'g' is ambiguous; use chain.g or quantum.g")
    path = ALIASES.get(key, key).split(".")
    value = yaml.safe_load(text) if text else None
    if path[-1] in ("ell_list", "L_list", "p_list", "t_grid") and not isinstance(value, list):
        value = [value]
    out: dict = {}
    node = out
    for part in path[:-1]:
        node = node.setdefault(part, {})
    node[path[-1]] = value
    return out


def _check_types(cfg: dict):
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}")
    if cfg["model"] not in ("classical", "quantum"):
        raise ConfigError("model must be classical or quantum")
    numeric = [("disorder", k) for k in cfg["disorder"]] + \
              [("chain", k) for k in cfg["chain"]] + [("quantum", k) for k in cfg["quantum"]]
    for sec, k in numeric:
        v = cfg[sec][k]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{sec}.{k} must be a number, got {v!r}")
    for k in ("L", "seed"):
        if not float(cfg["disorder"][k]).is_integer():
            raise ConfigError(f"disorder.{k} must be an integer")
    rt = cfg["runtime"]
    for k in ("ensemble", "n_points", "B_size", "workers"):
        if rt[k] is not None and (isinstance(rt[k], bool) or not isinstance(rt[k], int) or rt[k] < 1):
            raise ConfigError(f"runtime.{k} must be a positive integer")
    for k in ("t_max", "dt", "xi"):
        if rt[k] is not None and (isinstance(rt[k], bool) or not isinstance(rt[k], (int, float))
                                  or not rt[k] > 0):
            raise ConfigError(f"runtime.{k} must be a positive number")
    for k in ("ell_list", "L_list", "p_list", "t_grid", "fit_window"):
        v = rt[k]
        if v is not None and (not isinstance(v, list) or
                              not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
            raise ConfigError(f"runtime.{k} must be a list of numbers")
    if rt["fit_window"] is not None and len(rt["fit_window"]) != 2:
        raise ConfigError("runtime.fit_window must be [t_lo, t_hi]")


def load_config(path=None, overrides=(), experiment=None, seed=None, workers=None,
                output=None) -> ExperimentConfig:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, data)
    for item in overrides:
        _merge(cfg, parse_override(item))
    if experiment is not None:
        if cfg["experiment"] not in (None, experiment) and path is not None:
            raise ConfigError(f"config names {cfg['experiment']!r}, command line {experiment!r}")
        cfg["experiment"] = experiment
    if seed is not None:
        cfg["disorder"]["seed"] = seed
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cfg["runtime"]["workers"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if workers is not None:
        cfg["runtime"]["workers"] = workers
    if output is not None:
        cfg["runtime"]["output_dir"] = str(output)
    if cfg["experiment"] is None:
        raise ConfigError("no experiment given")
    L0, p0 = DISORDER_DEFAULTS.get(cfg["experiment"], (128, 0.0))
    cfg["disorder"]["L"] = L0 if cfg["disorder"]["L"] is None else cfg["disorder"]["L"]
    cfg["disorder"]["p"] = p0 if cfg["disorder"]["p"] is None else cfg["disorder"]["p"]
    _check_types(cfg)
    for k, v in PER_EXPERIMENT[cfg["experiment"]].items():
        if cfg["runtime"][k] is None:
            cfg["runtime"][k] = v
    return ExperimentConfig(cfg["experiment"], cfg["model"], cfg["disorder"], cfg["chain"],
                            cfg["quantum"], cfg["runtime"], cfg)


# -- experiments --------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _xi_hat(cfg: ExperimentConfig) -> float:
    from .anderson import localization_profile

    if cfg.runtime["xi"] is not None:
        return float(cfg.runtime["xi"])
    spec = cfg.disorder_spec(p=0.0)
    return localization_profile(spec, cfg.runtime["B_size"], 500, cfg.model, cfg.coupling).fitted_xi


def exp_anderson_profile(cfg):
    from .anderson import localization_profile

    prof = localization_profile(cfg.disorder_spec(), cfg.runtime["B_size"], cfg.runtime["ensemble"],
                                cfg.model, cfg.coupling)
    return {"profile.csv": prof.to_csv(), "fit.json": _dumps(prof.fit_record())}, prof.fit_record()


def exp_splitting_decay(cfg):
    from .splitting import boundary_decay_experiment, r_statistics

    xi = _xi_hat(cfg)
    spec = cfg.disorder_spec()
    ells = [int(l) for l in cfg.runtime["ell_list"]]
    n = cfg.runtime["ensemble"]
    decay = boundary_decay_experiment(spec, ells, max(200, n), cfg.coupling, xi, model=cfg.model)
    rst = r_statistics(spec, ells, max(500, n), cfg.coupling, xi, model=cfg.model)
    fit = {"xi_hat": xi, "boundary_rate": decay.rate, "boundary_rate_stderr": decay.rate_stderr,
           "r_rate": rst.rate, "r_rate_stderr": rst.rate_stderr,
           "boundary_ratio": decay.rate * xi, "r_ratio": rst.rate * xi, "ell_list": ells}
    return {"boundary_decay.csv": decay.to_csv(), "r_statistics.csv": rst.to_csv(),
            "fit.json": _dumps(fit)}, fit


def exp_griffiths_gaps(cfg):
    from .griffiths import gap_tail, predict_exponent

    spec = cfg.disorder_spec()
    xi = _xi_hat(cfg)
    files, summary = {}, {"xi_used": xi, "tables": {}}
    for ell in cfg.runtime["ell_list"]:
        ell = int(ell)
        tail = gap_tail(spec, ell, max(100, cfg.runtime["ensemble"]), xi, cfg.coupling)
        files[f"gaps_ell{ell}.csv"] = tail.to_csv()
        summary["tables"][ell] = {"d0": tail.d0, "n_gaps": tail.n_gaps, "tail_rate": tail.tail_rate,
                                  "bound_holds": tail.bound_holds(),
                                  "retained_fraction": tail.retained_fraction}
    if spec.p > 0:
        summary["prediction"] = json.loads(predict_exponent(spec.p, xi).to_json())
    files["summary.json"] = _dumps(summary)
    return files, summary


def _series_for_p(cfg, p, L, t_max, workers):
    from .correlation import estimate_C_classical, estimate_C_quantum

    dense = p >= 1.0
    spec = cfg.disorder_spec(p=0.0 if dense else p, L=L)
    if cfg.model == "quantum":
        grid = cfg.runtime["t_grid"] or list(np.linspace(0, t_max, cfg.runtime["n_points"]))
        return estimate_C_quantum(spec, cfg.quantum_params(), L, grid, cfg.runtime["ensemble"])
    return estimate_C_classical(spec, cfg.chain_params(), L, t_max, cfg.runtime["dt"],
                                cfg.runtime["ensemble"], cfg.runtime["n_points"], dense=dense,
                                workers=workers)


def exp_c_of_t(cfg):
    Ls = [int(L) for L in (cfg.runtime["L_list"] or [cfg.disorder["L"]])]
    files, summary = {}, {}
    for L in Ls:
        s = _series_for_p(cfg, cfg.disorder["p"], L, cfg.runtime["t_max"], cfg.runtime["workers"])
        name = "series.csv" if len(Ls) == 1 else f"series_L{L}.csv"
        files[name] = s.to_csv()
        t_end = s.t_grid[-1]
        c_end, _ = s.at(t_end)
        c_q, _ = s.at(t_end / 4)
        summary[L] = {**s.meta, "C_end": c_end, "ratio_end_over_quarter": c_end / c_q if c_q else None}
    files["summary.json"] = _dumps(summary)
    return files, summary


def exp_exponent_fit(cfg):
    from .correlation import fit_exponent
    from .griffiths import predict_exponent

    files, fits = {}, {}
    t_max = cfg.runtime["t_max"]
    window = cfg.runtime["fit_window"] or [t_max / 10, t_max]
    xi = None
    for p in cfg.runtime["p_list"]:
        s = _series_for_p(cfg, float(p), int(cfg.disorder["L"]), t_max, cfg.runtime["workers"])
        f = fit_exponent(s, tuple(window))
        files[f"series_p{p}.csv"] = s.to_csv()
        fits[str(p)] = json.loads(f.to_json())
        if 0 < float(p) < 1:
            xi = _xi_hat(cfg) if xi is None else xi
            fits[str(p)]["predicted_gamma"] = predict_exponent(float(p), xi).gamma
    files["fits.json"] = _dumps(fits)
    return files, fits


def exp_decomposition_audit(cfg):
    from .classical_chain import gibbs_sample, PhaseState, verlet_evolve
    from .correlation import audit_current_decomposition, poisson_residual
    from .disorder import ensemble_seeds, sample_disorder
    from .griffiths import compute_G
    from .splitting import residuals, splitting_coefficients, window_basis

    if cfg.model != "classical":
        raise ConfigError("decomposition-audit runs on the classical chain")
    ell = int(cfg.runtime["ell_list"][0])
    params = cfg.chain_params()
    xi = _xi_hat(cfg)
    spec = cfg.disorder_spec()
    for attempt, s in enumerate(ensemble_seeds(spec.seed, 1000)):
        real = sample_disorder(spec.with_seed(s))
        gi = compute_G(real, ell, xi, coupling=params.g0)
        if len(gi.G):
            break
    else:
        raise RuntimeError("no realization with a nonempty G found in 1000 tries")
    init = gibbs_sample(real, params, 1, seed=s, n_chains=1, min_ess_fraction=0.0)
    state = PhaseState(init.q[0], init.p[0])
    traj = verlet_evolve(state, real, params, cfg.runtime["t_max"], cfg.runtime["dt"], stride=1,
                         scheme="yoshida4", check_dt=False)
    oracle = None if (params.g == 0 or not np.any(real.tau)) else gibbs_sample(
        real, params, 4096, seed=s + 1, min_ess_fraction=0.0).q
    res = {int(g): residuals(splitting_coefficients(window_basis(real, int(g), ell, coupling=params.g0)),
                             params, gibbs_oracle=oracle, real=real) for g in gi.G}
    audit = audit_current_decomposition(traj, gi, res, real, params)
    poisson = max(float(np.max(np.abs(poisson_residual(traj, r, real, params)))) for r in res.values())
    rows = ["t,current_integral,residual_integral,boundary_term"]
    stride = max(1, len(audit.times) // 1000)
    for i in range(0, len(audit.times), stride):
        rows.append(f"{audit.times[i]:.10g},{audit.current_integral[i]:.17g},"
                    f"{audit.residual_integral[i]:.17g},{audit.boundary_term[i]:.17g}")
    summary = {"realization_seed": s, "attempts": attempt + 1, "G": gi.G.tolist(),
               "max_relative_residual": audit.max_relative_residual,
               "poisson_max_residual": poisson, "I1": audit.I1, "I2": audit.I2,
               "energy_drift": traj.drift, "scheme": traj.scheme, "dt": traj.dt}
    return {"audit.csv": "\n".join(rows) + "\n", "audit.json": _dumps(summary)}, summary


def exp_ed_crosscheck(cfg):
    from .disorder import ensemble_seeds, sample_disorder
    from .fermion import (continuity_error, ed_build, ed_current_correlation,
                          free_current_correlation, sparse_norm)

    qp = cfg.quantum_params()
    spec = cfg.disorder_spec()
    grid = [float(t) for t in cfg.runtime["t_grid"]]
    rows = ["realization,t,C_wick,C_ed,abs_diff"]
    worst, algebra = 0.0, []
    for i, s in enumerate(ensemble_seeds(spec.seed, cfg.runtime["ensemble"])):
        real = sample_disorder(spec.with_seed(s))
        system = ed_build(real, qp)
        ed = ed_current_correlation(system, qp.mu, grid).C_hat
        wick = free_current_correlation(real, qp, grid).C_hat if qp.g == 0 else [math.nan] * len(grid)
        for t, a, b in zip(grid, wick, ed):
            rows.append(f"{i},{t:.10g},{a:.17g},{b:.17g},{abs(a - b):.3e}")
            if not math.isnan(a):
                worst = max(worst, abs(a - b))
        algebra.append({"seed": s, "HN_commutator": sparse_norm(system.H.commutator(system.N)),
                        "continuity": continuity_error(system)})
    summary = {"max_abs_diff": worst, "algebra": algebra, "L": spec.L, "g": qp.g}
    return {"crosscheck.csv": "\n".join(rows) + "\n", "summary.json": _dumps(summary)}, summary


RUNNERS = {
    "anderson-profile": exp_anderson_profile,
    "splitting-decay": exp_splitting_decay,
    "griffiths-gaps": exp_griffiths_gaps,
    "c-of-t": exp_c_of_t,
    "exponent-fit": exp_exponent_fit,
    "decomposition-audit": exp_decomposition_audit,
    "ed-crosscheck": exp_ed_crosscheck,
}


# -- orchestration -------------------------------------------------------------------

def _version() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def run(cfg: ExperimentConfig) -> Path:
    """Execute one experiment; returns the finished run directory."""
    out_root = Path(cfg.runtime["output_dir"])
    out_root.mkdir(parents=True, exist_ok=True)
    digest = cfg.hash()
    final = out_root / f"{cfg.experiment}-{digest[:12]}"
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out_root))
    try:
        t0 = time.perf_counter()
        files, summary = RUNNERS[cfg.experiment](cfg)
        wall = time.perf_counter() - t0
        for name, text in files.items():
            (tmp / name).write_text(text)
        (tmp / "config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=True))
        manifest = {
            "experiment": cfg.experiment,
            "config_hash": digest,
            "version": _version(),
            "wall_time_s": round(wall, 3),
            "seeds": {"disorder": int(cfg.disorder["seed"])},
            "artifacts": {n: hashlib.sha256(t.encode()).hexdigest() for n, t in sorted(files.items())},
        }
        (tmp / "manifest.json").write_text(_dumps(manifest))
        if final.exists():
            shutil.rmtree(final)
        os.rename(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return final


EXIT_CODES = {"ConfigError": 2, "DisorderConfigError": 2, "EDResourceError": 3,
              "RunInvalidError": 4}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsechain", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run an experiment")
    run_p.add_argument("experiment", nargs="?",
                       help=f"one of {', '.join(EXPERIMENTS)} (may instead come from --config)")
    run_p.add_argument("overrides", nargs="*", metavar="key=value")
    run_p.add_argument("--config", type=Path)
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--workers", type=int)
    run_p.add_argument("--output", type=Path)
    sub.add_parser("list", help="list experiments")
    sub.add_parser("defaults", help="print the defaults table as YAML")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        print("\n".join(EXPERIMENTS))
        return 0
    if args.command == "defaults":
        print(yaml.safe_dump(DEFAULTS, sort_keys=False), end="")
        return 0
    if args.experiment is not None and "=" in args.experiment:
        args.overrides.insert(0, args.experiment)
        args.experiment = None
    try:
        cfg = load_config(args.config, args.overrides, args.experiment, args.seed, args.workers,
                          args.output)
        path = run(cfg)
    except Exception as exc:  # reported as a machine-readable record
        record = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return EXIT_CODES.get(type(exc).__name__, 1)
    print(json.dumps({"status": "ok", "run_dir": str(path)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
