"""Batch experiment runner.

Usage::

    coulombgas COMMAND [--config FILE] [flags]

Commands: ``equilibrium``, ``denoise-solve``, ``hciz``, ``mi``, ``mmse``,
``expand``, ``density``.  Flags override keys read from the JSON config file.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

COMMANDS = ("equilibrium", "denoise-solve", "hciz", "mi", "mmse", "expand", "density")
NEEDS_N = {"equilibrium", "denoise-solve", "hciz", "mi", "mmse"}
NEEDS_LAMBDA = {"denoise-solve", "hciz", "mi", "mmse", "density"}
BACKEND_NAMES = {"exact": "ExactDet", "bh": "BH", "mc": "MonteCarlo", "closed": "SemicircleClosed"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    command: str
    ensemble: str = "wigner"
    n: Optional[int] = None
    beta: int = 2
    lambdas: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    eta: float = 1e-4
    momentum: float = 1e-2
    tol: float = 1e-8
    max_iter: int = 500_000
    backend: Optional[str] = None
    out: Optional[str] = None
    format: str = "csv"
    grid_step: float = 5e-4
    eps: float = 1e-6

    def canonical(self) -> dict:
        """Normalized dict; the output path is excluded from hashing elsewhere."""
        return asdict(self)

    def hash_payload(self) -> dict:
        d = self.canonical()
        d.pop("out")
        return d


_KEYS = {f.name for f in fields(ExperimentConfig)}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def parse_lambda_list(text) -> list:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(v) for v in text]
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"--lambda: cannot parse {text!r}") from exc
    if not vals:
        raise ConfigError("--lambda: empty list")
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise ConfigError("--lambda: values must be finite and non-negative")
    return vals


def parse_seed_list(text) -> list:
    """``"1..10"`` (inclusive range), ``"1,2,5"`` or a single integer."""
    if isinstance(text, int):
        return [text]
    if isinstance(text, list):
        return [int(v) for v in text]
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds: cannot parse {text!r}") from exc
    if not seeds:
        raise ConfigError("--seeds: empty seed list")
    return seeds


def _parse_ensemble(text: str):
    kind, _, arg = str(text).partition(":")
    if kind not in ("wigner", "wishart", "uniform", "custom"):
        raise ConfigError(f"--ensemble: unknown kind {kind!r}")
    if kind == "wishart":
        try:
            alpha = float(arg)
        except ValueError as exc:
            raise ConfigError("--ensemble wishart needs a ratio, e.g. wishart:0.5") from exc
        if alpha <= 0:
            raise ConfigError("--ensemble wishart ratio must be positive")
        return kind, alpha
    if kind == "custom":
        if not arg:
            raise ConfigError("--ensemble custom needs a file, e.g. custom:pot.json")
        return kind, arg
    return kind, None


def _parse_backend(text: Optional[str]):
    if text is None:
        return None, None
    name, _, arg = text.partition(":")
    if name not in BACKEND_NAMES:
        raise ConfigError(f"--backend: unknown backend {text!r}")
    k = None
    if name == "mc":
        try:
            k = int(arg) if arg else 100_000
        except ValueError as exc:
            raise ConfigError("--backend mc:<K> needs an integer K") from exc
        if k < 2:
            raise ConfigError("--backend mc:<K> needs K >= 2")
    return BACKEND_NAMES[name], k


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coulombgas", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with configuration keys")
    p.add_argument("--ensemble")
    p.add_argument("--n", type=int)
    p.add_argument("--beta", type=int, choices=(1, 2))
    p.add_argument("--lambda", dest="lambdas")
    p.add_argument("--seeds")
    p.add_argument("--seed", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--backend")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--grid-step", dest="grid_step", type=float)
    p.add_argument("--eps", type=float)
    return p


def config_from_dict(d: dict) -> ExperimentConfig:
    unknown = set(d) - _KEYS
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
    if "command" not in d:
        raise ConfigError("missing command")
    d = dict(d)
    if "lambdas" in d:
        d["lambdas"] = parse_lambda_list(d["lambdas"])
    if "seeds" in d:
        d["seeds"] = parse_seed_list(d["seeds"])
    cfg = ExperimentConfig(**d)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}")
    _parse_ensemble(cfg.ensemble)
    _parse_backend(cfg.backend)
    if cfg.command in NEEDS_N and cfg.n is None:
        raise ConfigError(f"{cfg.command} requires --n")
    if cfg.n is not None and cfg.n < 1:
        raise ConfigError("--n must be >= 1")
    if cfg.beta not in (1, 2):
        raise ConfigError("--beta must be 1 or 2")
    if cfg.command in NEEDS_LAMBDA and not cfg.lambdas:
        raise ConfigError(f"{cfg.command} requires --lambda")
    if not cfg.seeds:
        raise ConfigError("seed list is empty")
    if cfg.format not in ("csv", "json"):
        raise ConfigError("--format must be csv or json")
    for name in ("eta", "tol", "grid_step", "eps"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be positive")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("--momentum must lie in [0, 1)")


def parse_config(argv=None) -> ExperimentConfig:
    """Merge the optional config file with command-line flags."""
    parser = build_parser()
    ns = parser.parse_args(argv)
    data = {}
    if ns.config:
        try:
            with open(ns.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("--config: top level must be an object")
    if ns.seed is not None and ns.seeds is not None:
        raise ConfigError("--seed and --seeds are mutually exclusive")
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("config", "seed")}
    if ns.seed is not None:
        flags["seeds"] = [ns.seed]
    data.update(flags)
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


def _seed_streams(seed: int):
    """Independent signal and noise seeds for one task seed."""
    ss = np.random.SeedSequence(seed)
    sig, noise, mc = ss.spawn(3)
    return sig, noise, mc


def _ensemble_spec(cfg: ExperimentConfig):
    from .ensembles import EnsembleSpec, Potential

    kind, arg = _parse_ensemble(cfg.ensemble)
    if kind == "wishart":
        return EnsembleSpec("wishart", cfg.n, cfg.beta, alpha=arg)
    if kind == "custom":
        try:
            with open(arg) as fh:
                d = json.load(fh)
            pot = Potential(float(d.get("log_coeff", 0.0)), tuple(d["poly_coeffs"]))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"custom potential file {arg!r}: {exc}") from exc
        return EnsembleSpec("custom", cfg.n, cfg.beta, potential=pot)
    return EnsembleSpec(kind, cfg.n, cfg.beta)


def _solver_opts(cfg: ExperimentConfig):
    from .coulomb import SolverOptions

    return SolverOptions(eta=cfg.eta, momentum=cfg.momentum, tol=cfg.tol, max_iter=cfg.max_iter)


def _instance(cfg, spec, lam, seed):
    from .ensembles import make_denoising_instance, sample_ensemble, sample_wigner

    sig, noise, _ = _seed_streams(seed)
    sample = sample_ensemble(spec, np.random.default_rng(sig))
    xi = sample_wigner(cfg.n, cfg.beta, np.random.default_rng(noise))
    return sample, make_denoising_instance(sample.matrix, lam, cfg.beta, xi=xi)


def _task_equilibrium(cfg, spec, lam, seed):
    from .coulomb import _default_init, solve_warmup

    pot = spec.resolved_potential()
    st = solve_warmup(pot, _default_init(pot, cfg.n), cfg.beta, _solver_opts(cfg))
    lam_s = np.sort(st.lam)
    return [{"index": i, "lambda_s": float(v), "iterations": st.iter,
             "converged": st.converged} for i, v in enumerate(lam_s)]


def _task_denoise_solve(cfg, spec, lam, seed):
    from .coulomb import solve_denoising

    _, inst = _instance(cfg, spec, lam, seed)
    pot = spec.resolved_potential() if spec.kind != "uniform" else None
    if pot is None:
        raise ValueError("denoise-solve needs an ensemble with a confining potential")
    st = solve_denoising(inst.lamY, lam, pot, cfg.beta, opts=_solver_opts(cfg))
    lam_s = np.sort(st.lam)
    y = np.sort(inst.lamY.values)
    return [{"lambda": lam, "index": i, "lambda_s": float(a), "lambda_y": float(b),
             "iterations": st.iter, "converged": st.converged}
            for i, (a, b) in enumerate(zip(lam_s, y))]


def _default_backend(cfg):
    return "ExactDet" if cfg.beta == 2 else "BH"


def _task_hciz(cfg, spec, lam, seed):
    from .denoise import hciz_backend
    from .ensembles import sample_ensemble

    backend, k = _parse_backend(cfg.backend)
    backend = backend or _default_backend(cfg)
    _, inst = _instance(cfg, spec, lam, seed)
    sig2 = np.random.SeedSequence([seed, 1])
    lam_s = sample_ensemble(spec, np.random.default_rng(sig2)).spectrum
    _, _, mc = _seed_streams(seed)
    est = hciz_backend(lam_s, inst.lamY, lam, cfg.beta, backend, K=k or 100_000, seed=mc)
    return [{"lambda": lam, "beta": cfg.beta, "n": cfg.n, "value": est.value,
             "stderr": est.stderr, "method": est.method}]


def _task_mi(cfg, spec, lam, seed, with_mmse=False):
    from . import denoise as D
    from .ensembles import sample_ensemble

    backend, k = _parse_backend(cfg.backend)
    _, inst = _instance(cfg, spec, lam, seed)
    if spec.kind == "uniform" and backend is None:
        if with_mmse:
            rep = D.mmse_uniform_finiteN(inst)
        else:
            rep = D.mi_uniform_finiteN(inst)
    elif with_mmse:
        if backend == "SemicircleClosed":
            rep = D.mi_from_spectra(inst.lamY, inst.lamY, lam, cfg.beta, backend)
            rep.mmse = D.mmse_wigner_closed(lam)
        else:
            from .coulomb import solve_denoising

            pot = spec.resolved_potential()
            st = solve_denoising(inst.lamY, lam, pot, cfg.beta, opts=_solver_opts(cfg))
            rep = D.mi_from_spectra(np.sort(st.lam), inst.lamY, lam, cfg.beta, "ExactDet")
            rep.mmse = D.mmse_hf(inst, st.lam)
            rep.method = "HellmannFeynman"
    else:
        backend = backend or _default_backend(cfg)
        lam_s = sample_ensemble(spec, np.random.default_rng(np.random.SeedSequence([seed, 1])))
        _, _, mc = _seed_streams(seed)
        rep = D.mi_from_spectra(lam_s.spectrum, inst.lamY, lam, cfg.beta, backend,
                                K=k or 100_000, seed=mc)
    row = rep.row()
    row["seed"] = seed
    return [row]


def _task_density(cfg, spec, lam, seed):
    from .freeprob import density_from_green

    d = density_from_green(lam, step=cfg.grid_step, eps=cfg.eps)
    return [{"lambda": lam, "x": float(x), "rho": float(r), "method": "GreenSolver"}
            for x, r in zip(d.grid, d.values)]


COLUMNS = {
    "equilibrium": ["index", "lambda_s", "iterations", "converged"],
    "denoise-solve": ["lambda", "index", "lambda_s", "lambda_y", "iterations", "converged"],
    "hciz": ["lambda", "beta", "n", "value", "stderr", "method"],
    "mi": ["lambda", "beta", "n", "seed", "mi", "mmse", "method"],
    "mmse": ["lambda", "beta", "n", "seed", "mi", "mmse", "method"],
    "density": ["x", "rho", "lambda"],
}
_TRAILER = ["seed", "method", "config_hash", "status", "error"]


def _columns(command):
    cols = list(COLUMNS[command])
    return cols + [c for c in _TRAILER if c not in cols]


def _run_expand(cfg):
    from . import cumulants as C

    kind, arg = _parse_ensemble(cfg.ensemble)
    if kind == "wigner":
        theta = C.wigner_moments()
    elif kind == "uniform":
        theta = C.uniform_moments()
    elif kind == "wishart":
        from fractions import Fraction

        theta = C.centered_mp_moments(Fraction(arg).limit_denominator(10**6))
    else:
        raise ConfigError("expand supports wigner, uniform and wishart:<phi>")
    rows = []
    for name, series in (("mi", C.mi_expansion(theta)), ("mmse", C.mmse_expansion(theta))):
        for rec in series.to_records():
            num, den = rec["numerator"], rec["denominator"]
            dec = float(num) / float(den) if isinstance(num, int) else None
            rows.append({"quantity": name, **rec, "decimal": dec, "method": "Expansion"})
    return rows, ["quantity", "exponent", "numerator", "denominator", "decimal"]


def _threads() -> int:
    try:
        cap = int(os.environ.get("COULOMBGAS_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, cap)


def run(cfg: ExperimentConfig) -> tuple:
    """Execute ``cfg``; returns ``(exit_code, artifact_text)``."""
    from .io import config_hash, header_block, write_artifact

    validate(cfg)
    chash = config_hash(cfg.hash_payload())
    header = header_block(cfg.hash_payload(), cfg.seeds)

    if cfg.command == "expand":
        rows, cols = _run_expand(cfg)
        cols = cols + [c for c in _TRAILER if c not in cols]
        for r in rows:
            r.update(config_hash=chash, status="ok", seed="")
        return EXIT_OK, write_artifact(cfg.out, rows, cols, header, cfg.format)

    spec = None if cfg.command == "density" else _ensemble_spec(cfg)
    task_fn = {
        "equilibrium": _task_equilibrium,
        "denoise-solve": _task_denoise_solve,
        "hciz": _task_hciz,
        "mi": _task_mi,
        "mmse": lambda c, s, l, sd: _task_mi(c, s, l, sd, with_mmse=True),
        "density": _task_density,
    }[cfg.command]
    lams = cfg.lambdas if cfg.command in NEEDS_LAMBDA else [0.0]
    seeds = cfg.seeds if cfg.command != "density" else cfg.seeds[:1]
    tasks = sorted((lam, seed) for lam in lams for seed in seeds)

    def one(task):
        lam, seed = task
        try:
            rows = task_fn(cfg, spec, lam, seed)
            status, err = "ok", ""
        except Exception as exc:  # failure isolation: one task never aborts the sweep
            rows = [{"lambda": lam}]
            status, err = "failed", f"{type(exc).__name__}: {exc}"
        for r in rows:
            r.setdefault("seed", seed)
            r.setdefault("method", cfg.command)
            r.update(config_hash=chash, status=status, error=err)
        return task, rows, status

    nthreads = min(_threads(), len(tasks))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    rows = [row for _, rs, _ in results for row in rs]
    failures = [r for r in results if r[2] != "ok"]
    text = write_artifact(cfg.out, rows, _columns(cfg.command), header, cfg.format)
    for (lam, seed), rs, _ in failures:
        print(f"task lambda={lam} seed={seed} failed: {rs[0]['error']}", file=sys.stderr)
    code = EXIT_NUMERIC if failures and len(failures) == len(results) else EXIT_OK
    return code, text


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"coulombgas: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        code, text = run(cfg)
    except ConfigError as exc:
        print(f"coulombgas: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.out is None:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
