"""Configuration-driven experiment runner.

Commands
--------
generate    write benchmark data (true values, noisy values, sigmas)
solve       run one solver on one benchmark and write its solution
sweep       run a solver across a list of cut-offs (or alphas for the
            entropy solvers) on the same data
resolution  delta-pair reconstruction sweep over (beta, delta0)

Configuration is a flat ``key=value`` text file plus command-line flags;
flags win over file values.  Every run writes a ``manifest.txt`` with the
fully resolved configuration, which can itself be passed back through
``--config`` to reproduce the run byte for byte.  Output locations default
to ``./runs``, overridable by the LINVERSE_OUTPUT_ROOT environment variable
and the ``--output-root`` flag, and each run gets its own directory named
by a hash of the resolved configuration.  Existing run directories are
never overwritten without ``--force``.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import mem, spectral, svd
from .core import DiscretizedProblem, SupportInterval, ObjectGrid, chi_squared, rmse
from .mem import MEMConfig, gaussian_model_class, two_gaussian_model_class
from .svd import (
    compute_singular_system,
    constrained_svd_solve,
    expansion_coefficients,
    reconstruct,
    solution_chi_squared,
    truncation_index,
)

ENV_OUTPUT_ROOT = "LINVERSE_OUTPUT_ROOT"

SOLVERS = ("svd", "tsvd", "csvd", "stdmem", "mem", "expmem", "scmem")
COMMANDS = ("generate", "solve", "sweep", "resolution")
OBJECTS = ("two_gaussian", "delta_pair")
MODELS = ("gaussian", "two_gaussian")
COSTS = ("norm", "chisq")

DEFAULT_MODEL_PARAMS = {
    "gaussian": (1.0, 0.0, 2.0),
    "two_gaussian": (0.5, 0.5, -1.0, 1.0, 1.0, 1.0),
}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending field."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration (all defaults materialized)."""

    command: str
    beta: float = 10.0
    ntau: int = 25
    noise: float = 0.0
    seed: int = 1
    grid_min: float = -5.0
    grid_max: float = 5.0
    grid_n: int = 201
    object: str = "two_gaussian"
    delta0: float = 1.0
    support_min: float | None = None
    support_max: float | None = None
    solver: str = "tsvd"
    alpha: float = 1.0
    xi: float = 0.1
    eps: float | None = None
    max_iters: int = 500
    theta: float | None = None
    rank_tol: float = 1e-10
    cutoff: float | None = None
    cost: str = "norm"
    model: str = "gaussian"
    model_params: tuple[float, ...] = ()
    cutoffs: tuple[float, ...] = (0.1, 0.05, 0.01, 0.001)
    alphas: tuple[float, ...] = (1e-4, 1e-2, 1.0, 1e2)
    betas: tuple[float, ...] = (5.0, 10.0, 20.0)
    delta0s: tuple[float, ...] = tuple(np.round(np.arange(0.05, 1.55, 0.05), 4))
    prominence: float = 0.75
    workers: int = 1
    output_root: str = "runs"
    force: bool = False

    def support(self) -> SupportInterval | None:
        if self.support_min is None:
            return None
        return SupportInterval(self.support_min, self.support_max)

    def grid(self) -> ObjectGrid:
        return ObjectGrid(self.grid_min, self.grid_max, self.grid_n)

    def resolved_model_params(self) -> tuple[float, ...]:
        return self.model_params or DEFAULT_MODEL_PARAMS[self.model]


# -- parsing -------------------------------------------------------------------

_FLOAT_KEYS = {
    "beta", "noise", "grid_min", "grid_max", "delta0", "alpha", "xi",
    "rank_tol", "prominence",
}
_OPT_FLOAT_KEYS = {"support_min", "support_max", "eps", "theta", "cutoff"}
_INT_KEYS = {"ntau", "seed", "grid_n", "max_iters", "workers"}
_LIST_KEYS = {"model_params", "cutoffs", "alphas", "betas", "delta0s"}
_CHOICE_KEYS = {
    "command": COMMANDS,
    "object": OBJECTS,
    "solver": SOLVERS,
    "cost": COSTS,
    "model": MODELS,
}
_BOOL_KEYS = {"force"}
_STR_KEYS = {"output_root"}
_ALL_KEYS = (
    set(_CHOICE_KEYS) | _FLOAT_KEYS | _OPT_FLOAT_KEYS | _INT_KEYS
    | _LIST_KEYS | _BOOL_KEYS | _STR_KEYS
)


def _parse_float_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    if ":" in text:
        start, stop, step = (float(p) for p in text.split(":"))
        return tuple(np.round(np.arange(start, stop + 0.5 * step, step), 10))
    if not text:
        return ()
    return tuple(float(p) for p in text.split(","))


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value file; blank lines and # comments are ignored."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{lineno}: expected key=value, got {line!r}"])
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def _coerce(raw: dict[str, str], problems: list[str]) -> dict:
    out: dict = {}
    for key, text in raw.items():
        if key not in _ALL_KEYS:
            problems.append(f"unknown configuration key {key!r}")
            continue
        try:
            if key in _CHOICE_KEYS:
                if text not in _CHOICE_KEYS[key]:
                    problems.append(
                        f"{key} must be one of {', '.join(_CHOICE_KEYS[key])}, got {text!r}"
                    )
                    continue
                out[key] = text
            elif key in _FLOAT_KEYS:
                out[key] = float(text)
            elif key in _OPT_FLOAT_KEYS:
                out[key] = None if text.lower() in ("", "none") else float(text)
            elif key in _INT_KEYS:
                out[key] = int(text)
            elif key in _LIST_KEYS:
                out[key] = _parse_float_list(text)
            elif key in _BOOL_KEYS:
                out[key] = text.lower() in ("1", "true", "yes", "on")
            else:
                out[key] = text
        except ValueError:
            problems.append(f"{key}: cannot parse {text!r}")
    return out


def _validate(cfg: RunConfig, problems: list[str]) -> None:
    if cfg.beta <= 0:
        problems.append(f"beta must be positive, got {cfg.beta}")
    if cfg.ntau < 1:
        problems.append(f"ntau must be >= 1, got {cfg.ntau}")
    if cfg.noise < 0:
        problems.append(f"noise must be >= 0, got {cfg.noise}")
    if cfg.grid_n < 2:
        problems.append(f"grid_n must be >= 2, got {cfg.grid_n}")
    if cfg.grid_min >= cfg.grid_max:
        problems.append(f"grid_min must be < grid_max, got [{cfg.grid_min}, {cfg.grid_max}]")
    if not 0 < cfg.xi < 1:
        problems.append(f"xi must lie in (0, 1), got {cfg.xi}")
    if cfg.alpha <= 0:
        problems.append(f"alpha must be positive, got {cfg.alpha}")
    if cfg.eps is not None and cfg.eps <= 0:
        problems.append(f"eps must be positive, got {cfg.eps}")
    if cfg.theta is not None and cfg.theta < 0:
        problems.append(f"theta must be >= 0, got {cfg.theta}")
    if not 0 < cfg.rank_tol < 1:
        problems.append(f"rank_tol must lie in (0, 1), got {cfg.rank_tol}")
    if cfg.cutoff is not None and not 0 < cfg.cutoff <= 1:
        problems.append(f"cutoff must lie in (0, 1], got {cfg.cutoff}")
    if cfg.max_iters < 1:
        problems.append(f"max_iters must be >= 1, got {cfg.max_iters}")
    if cfg.delta0 <= 0:
        problems.append(f"delta0 must be positive, got {cfg.delta0}")
    if cfg.prominence < 0:
        problems.append(f"prominence must be >= 0, got {cfg.prominence}")
    if cfg.workers < 1:
        problems.append(f"workers must be >= 1, got {cfg.workers}")
    if (cfg.support_min is None) != (cfg.support_max is None):
        problems.append("support_min and support_max must be given together")
    elif cfg.support_min is not None and cfg.support_min >= cfg.support_max:
        problems.append(
            f"support_min must be < support_max, got [{cfg.support_min}, {cfg.support_max}]"
        )
    n_expected = len(DEFAULT_MODEL_PARAMS[cfg.model])
    if cfg.model_params and len(cfg.model_params) != n_expected:
        problems.append(
            f"model_params for {cfg.model!r} needs {n_expected} values, got {len(cfg.model_params)}"
        )


def parse_config(
    flags: dict | None = None, config_file: str | Path | None = None
) -> RunConfig:
    """Merge defaults, config file and flags (flags win) into a RunConfig.

    Every problem is collected and reported at once through
    :class:`ConfigError`.
    """
    problems: list[str] = []
    merged: dict = {}
    if config_file is not None:
        merged.update(_coerce(read_config_file(config_file), problems))
    if flags:
        merged.update({k: v for k, v in flags.items() if v is not None})
    if "command" not in merged:
        problems.append("no command given (flag or config key 'command')")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**merged)
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


# -- output writing --------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{value:.17g}"
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def manifest_text(cfg: RunConfig, output_root_source: str) -> str:
    lines = ["# linverse run manifest; pass back via --config to reproduce"]
    lines.append(f"# output_root from {output_root_source}")
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if value is None:
            rendered = "none"
        elif isinstance(value, tuple):
            rendered = ",".join(_fmt(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = _fmt(value)
        lines.append(f"{f.name}={rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    # identity of the numerical experiment only: storage and scheduling
    # knobs do not change results
    skip = {"output_root", "force", "workers"}
    payload = "\n".join(
        f"{f.name}={getattr(cfg, f.name)!r}"
        for f in sorted(fields(RunConfig), key=lambda f: f.name)
        if f.name not in skip
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def run_directory(cfg: RunConfig) -> Path:
    return Path(cfg.output_root) / f"{cfg.command}-{config_hash(cfg)}"


# -- solver dispatch ---------------------------------------------------------------

def _benchmark(cfg: RunConfig) -> spectral.SpectralBenchmark:
    return spectral.SpectralBenchmark(
        beta=cfg.beta,
        ntau=cfg.ntau,
        grid=cfg.grid(),
        object_kind=cfg.object,
        delta0=cfg.delta0,
        noise_level=cfg.noise,
        seed=cfg.seed,
        support=cfg.support(),
    )


def _override_theta(problem: DiscretizedProblem, theta: float | None) -> DiscretizedProblem:
    if theta is None:
        return problem
    from dataclasses import replace as dc_replace

    cons = tuple(dc_replace(c, theta=theta) for c in problem.integral_constraints)
    from .core import with_constraints

    return with_constraints(problem, cons, problem.bound_constraints)


def _model_class(cfg: RunConfig):
    make = gaussian_model_class if cfg.model == "gaussian" else two_gaussian_model_class
    return make(mean_bounds=(cfg.grid_min, cfg.grid_max))


def _default_model(cfg: RunConfig, problem: DiscretizedProblem) -> np.ndarray:
    cls = _model_class(cfg)
    model = cls.evaluate(problem.grid.points, np.asarray(cfg.resolved_model_params()))
    return mem._renormalize(model, problem)


def _mem_config(cfg: RunConfig, inner: str = "std") -> MEMConfig:
    return MEMConfig(
        alpha=cfg.alpha,
        xi=cfg.xi,
        eps=cfg.eps,
        max_iters=cfg.max_iters,
        inner_solver=inner,
    )


def _solve_one(cfg: RunConfig, problem: DiscretizedProblem, override_alpha=None, override_cutoff=None):
    """Run the configured solver; returns (solution vector, metrics dict)."""
    metrics: dict[str, object] = {}
    cutoff = cfg.cutoff if override_cutoff is None else override_cutoff
    if cfg.solver in ("svd", "tsvd", "csvd"):
        system = compute_singular_system(problem, cfg.rank_tol)
        coeffs = expansion_coefficients(system, problem.data)
        metrics["rank"] = system.rank
        for i, lam in enumerate(system.lambdas, 1):
            metrics[f"lambda_{i}"] = lam
        if cfg.solver == "svd":
            r_cut = system.rank
        elif cutoff is not None:
            r_cut = int(np.sum(system.lambdas / system.lambdas[0] >= cutoff))
        else:
            r_cut = truncation_index(system, problem.data)
        if cfg.solver == "csvd":
            a = constrained_svd_solve(problem, system, coeffs, cost=cfg.cost)
            metrics["cost"] = cfg.cost
        else:
            a = reconstruct(system, coeffs, r_cut)
        metrics["r_cut"] = r_cut
        metrics["chisq"] = solution_chi_squared(problem, system, np.concatenate(
            [coeffs.b[:r_cut], np.zeros(system.rank - r_cut)]
        )) if cfg.solver != "csvd" else chi_squared(problem, np.maximum(a, 0))
    else:
        alpha = cfg.alpha if override_alpha is None else override_alpha
        mem_cfg = MEMConfig(
            alpha=alpha, xi=cfg.xi, eps=cfg.eps, max_iters=cfg.max_iters,
            inner_solver={"scmem": "std"}.get(cfg.solver, "std"),
        )
        if cfg.solver == "scmem":
            cls = _model_class(cfg)
            sol = mem.sc_mem_solve(problem, cls, np.asarray(cfg.resolved_model_params()), mem_cfg)
            metrics["model_params"] = ",".join(_fmt(v) for v in sol.model_params)
        else:
            model = _default_model(cfg, problem)
            solver = {
                "stdmem": mem.std_mem_solve,
                "mem": mem.mem_solve_direct,
                "expmem": mem.exp_mem_solve,
            }[cfg.solver]
            sol = solver(problem, model, mem_cfg)
        a = sol.a
        metrics["iterations"] = sol.iterations
        metrics["converged"] = sol.converged
        metrics["f_value"] = sol.f_value
        metrics["chisq"] = chi_squared(problem, a)
    for con in problem.integral_constraints:
        w = con.weights(problem.grid)
        metrics[f"residual_{con.label or 'constraint'}"] = abs(con.c - w @ a)
    return a, metrics


# -- commands ----------------------------------------------------------------------

def _write_data(outdir: Path, problem: DiscretizedProblem, bench) -> None:
    y, g_true, _ = spectral._noiseless_data(bench)
    write_csv(
        outdir / "data.csv",
        ["y", "g_true", "g_noisy", "sigma"],
        zip(y, g_true, problem.data.values, problem.data.sigmas),
    )


def _truth_column(truth, n: int) -> np.ndarray:
    if isinstance(truth, spectral.DeltaPairTruth):
        return np.full(n, np.nan)
    return truth


def cmd_generate(cfg: RunConfig, outdir: Path) -> None:
    bench = _benchmark(cfg)
    problem, _ = spectral.generate_benchmark(bench)
    _write_data(outdir, problem, bench)


def cmd_solve(cfg: RunConfig, outdir: Path) -> None:
    bench = _benchmark(cfg)
    problem, truth = spectral.generate_benchmark(bench)
    problem = _override_theta(problem, cfg.theta)
    a, metrics = _solve_one(cfg, problem)
    _write_data(outdir, problem, bench)
    truth_col = _truth_column(truth, cfg.grid_n)
    write_csv(
        outdir / "solution.csv",
        ["x", "a_true", "a_solved"],
        zip(problem.grid.points, truth_col, a),
    )
    if not isinstance(truth, spectral.DeltaPairTruth):
        metrics["rmse"] = rmse(a, truth)
    else:
        peaks = spectral.detect_peaks(a, cfg.prominence)
        metrics["gap_true"] = truth.gap
        metrics["gap_reconstructed"] = (
            problem.grid.points[peaks[-1]] - problem.grid.points[peaks[0]]
            if len(peaks) >= 2 else 0.0
        )
    write_csv(outdir / "metrics.csv", ["metric", "value"], sorted(metrics.items()))


def cmd_sweep(cfg: RunConfig, outdir: Path) -> None:
    bench = _benchmark(cfg)
    problem, truth = spectral.generate_benchmark(bench)
    problem = _override_theta(problem, cfg.theta)
    _write_data(outdir, problem, bench)
    truth_col = _truth_column(truth, cfg.grid_n)
    mem_family = cfg.solver in ("stdmem", "mem", "expmem", "scmem")
    sweep_values = cfg.alphas if mem_family else cfg.cutoffs
    param_name = "alpha" if mem_family else "cutoff"

    def one(value):
        if mem_family:
            return _solve_one(cfg, problem, override_alpha=value)
        return _solve_one(cfg, problem, override_cutoff=value)

    results = []
    if cfg.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, sweep_values))
    else:
        results = [one(v) for v in sweep_values]

    rows = []
    for value, (a, metrics) in zip(sweep_values, results):
        write_csv(
            outdir / f"solution_{param_name}_{_fmt(value)}.csv",
            ["x", "a_true", "a_solved"],
            zip(problem.grid.points, truth_col, a),
        )
        err = rmse(a, truth) if not isinstance(truth, spectral.DeltaPairTruth) else np.nan
        rows.append(
            (
                value,
                metrics.get("r_cut", metrics.get("iterations", 0)),
                err,
                metrics["chisq"],
            )
        )
    write_csv(outdir / "sweep.csv", [param_name, "r_cut_or_iters", "rmse", "chisq"], rows)


def cmd_resolution(cfg: RunConfig, outdir: Path) -> None:
    support = cfg.support() or SupportInterval(-2.0, 2.0)
    cells = spectral.resolution_experiment(
        cfg.betas,
        cfg.delta0s,
        ntau=cfg.ntau,
        support=support,
        grid=cfg.grid(),
        noise_level=cfg.noise,
        seed=cfg.seed,
        prominence_tol=cfg.prominence,
        rank_tol=cfg.rank_tol,
        cutoff=cfg.cutoff,
        workers=cfg.workers,
    )
    cells_dir = outdir / "cells"
    cells_dir.mkdir(exist_ok=True)
    rows = []
    for cell in cells:
        rows.append(
            (cell.beta, cell.delta0, cell.gap_true, cell.gap_reconstructed,
             int(cell.bimodal), cell.r_cut)
        )
        write_csv(
            cells_dir / f"cell_beta{_fmt(cell.beta)}_d{_fmt(cell.delta0)}.csv",
            ["beta", "delta0", "gap_true", "gap_reconstructed", "bimodal", "r_cut"],
            [rows[-1]],
        )
    write_csv(
        outdir / "resolution.csv",
        ["beta", "delta0", "gap_true", "gap_reconstructed", "bimodal", "r_cut"],
        rows,
    )
    limits = spectral.resolution_limits(cells)
    write_csv(
        outdir / "limits.csv",
        ["beta", "temperature", "delta0_min"],
        [(b, 1.0 / b, lim if lim is not None else np.nan) for b, lim in sorted(limits.items())],
    )


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linverse",
        description="Inverse-problem benchmark experiments (TSVD and maximum entropy).",
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="omit to take the command from the config file")
    parser.add_argument("--config", help="key=value configuration file (e.g. a manifest)")
    parser.add_argument("--force", action="store_true", default=None,
                        help="overwrite an existing run directory")
    for key in sorted(_ALL_KEYS - {"command", "force"}):
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    config_file = args.pop("config")
    env_root = os.environ.get(ENV_OUTPUT_ROOT)
    if args.get("output_root") is not None:
        source = "--output-root flag"
    elif env_root is not None:
        source = f"environment ({ENV_OUTPUT_ROOT})"
    else:
        source = "default"

    problems: list[str] = []
    flags = _coerce({k: v for k, v in args.items()
                     if v is not None and not isinstance(v, bool)}, problems)
    if args.get("force"):
        flags["force"] = True
    if args.get("output_root") is None and env_root is not None:
        flags["output_root"] = env_root
    try:
        if problems:
            raise ConfigError(problems)
        cfg = parse_config(flags=flags, config_file=config_file)
    except ConfigError as err:
        print("configuration errors:", file=sys.stderr)
        for p in err.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2

    outdir = run_directory(cfg)
    if outdir.exists() and not cfg.force:
        print(f"run directory {outdir} exists; pass --force to overwrite", file=sys.stderr)
        return 2
    outdir.mkdir(parents=True, exist_ok=True)

    try:
        {"generate": cmd_generate, "solve": cmd_solve,
         "sweep": cmd_sweep, "resolution": cmd_resolution}[cfg.command](cfg, outdir)
    except (mem.DivergenceError, svd.ConstraintInfeasibleError,
            svd.DegenerateProblemError, np.linalg.LinAlgError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return 3
    (outdir / "manifest.txt").write_text(manifest_text(cfg, source))
    print(outdir)
    return 0


def console_main() -> None:
    raise SystemExit(main())
