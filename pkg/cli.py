#!/usr/bin/env python3
"""
cli.py : experiment runner.

Usage :
  python cli.py solve config.json [--seed S] [--seeds N] [--jobs J] [--out-dir DIR] [--epochs K]
  python cli.py experiment integral|ct [--set noise.sigma=0.01 ...] [same flags]
  python cli.py norm-estimate matrix.csv --rx 1.5 --ry 2

Environment (.env is read first) :
  BANACH_SGD_JOBS       worker processes for seed ensembles
  BANACH_SGD_OUT_DIR    output directory
  BANACH_SGD_LOG_LEVEL  DEBUG, INFO, WARNING ...

Exit codes : 0 ok, 1 validation, 2 runtime invariant, 3 I/O.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from dotenv import load_dotenv  # noqa: E402

import diagnostics  # noqa: E402
from errors import (  # noqa: E402
    EXIT_OK,
    BanachSGDError,
    ConfigurationError,
    DataFileError,
    exit_code_for,
)
from noise import RNG_ALGORITHM, NoiseSpec, corrupt  # noqa: E402
from operators import (  # noqa: E402
    RadonGeometry,
    boyd_operator_norm,
    build_integral_operator,
    build_radon_operator,
    exact_sparse_signal,
    observe,
    partition_rows,
    read_matrix_csv,
    sparse_disk_phantom,
)
from solver import SolverConfig, StepSchedule, StoppingRule, make_context  # noqa: E402
from spaces import SpaceDescriptor  # noqa: E402

__version__ = "0.1.0"

# ─── CONSTANTES ───────────────────────────────────────────────────────────────
DEFAULT_JOBS = 1
DEFAULT_OUT_DIR = "results"
DEFAULT_LOG_LEVEL = "INFO"
PRESETS = ("integral", "ct", "custom")
REFERENCES = ("exact", "minimum_norm")
SECTION_KEYS = {
    "schedule": {"kind", "mu0", "beta", "scale"},
    "noise": {"kind", "sigma", "pct", "lo", "hi", "salt_value", "pepper_value", "seed"},
    "stopping": {"kind", "beta", "theta"},
    "geometry": {"grid_side", "n_angles", "angle_step", "n_detectors", "pixel_size"},
}
PRESET_DEFAULTS = {
    "integral": {"n": 1000, "n_batches": 100, "epochs": 250},
    "ct": {"n_batches": 60, "epochs": 100, "noise": {"kind": "gaussian", "sigma": 0.01}},
    "custom": {"n_batches": 1, "epochs": 100},
}
TRACE_NAME = "trace_seed{seed}.csv"
ENSEMBLE_NAME = "ensemble_mean.csv"
RECONSTRUCTION_NAME = "reconstruction"
PLOT_NAME = "convergence.svg"
MANIFEST_NAME = "manifest.json"
PHANTOM_STREAM = 1


# ─── CONFIG ───────────────────────────────────────────────────────────────────
def _default_schedule():
    return {"kind": "epoch_decay", "scale": "L_max"}


@dataclass
class ExperimentConfig:
    """One experiment: problem preset, geometry of X and Y, method, noise and seeds.

    schedule.scale accepts a number, "L_max" or "L_max/<d>". The a-priori
    stopping rule takes delta from the realised noise; its beta defaults to
    the polynomial schedule's beta.
    """

    preset: str = "integral"
    method: str = "sgd"
    r_x: float = 2.0
    p: float = 2.0
    r_y: float = 2.0
    q: Optional[float] = None
    n: int = 1000
    n_batches: int = 100
    midpoint_columns: bool = True
    epochs: int = 250
    seed: int = 0
    n_seeds: int = 2
    geometry: dict = field(default_factory=dict)
    phantom_noise: float = 0.0
    phantom_seed: Optional[int] = None
    matrix: Optional[str] = None
    signal: Optional[str] = None
    schedule: dict = field(default_factory=_default_schedule)
    noise: dict = field(default_factory=lambda: {"kind": "none"})
    stopping: dict = field(default_factory=lambda: {"kind": "max_epochs"})
    reference: str = "exact"
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigurationError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.reference not in REFERENCES:
            raise ConfigurationError(f"reference must be one of {REFERENCES}, got {self.reference!r}")
        if self.n_seeds < 1:
            raise ConfigurationError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.phantom_noise < 0:
            raise ConfigurationError(f"phantom_noise must be >= 0, got {self.phantom_noise}")
        if self.phantom_seed is not None and self.phantom_seed == self.noise_spec().seed:
            raise ConfigurationError(f"phantom_seed must differ from the noise seed {self.phantom_seed}")
        if self.preset == "custom" and not (self.matrix and self.signal):
            raise ConfigurationError("custom preset needs 'matrix' and 'signal' CSV paths")
        rows = self.row_count()
        if rows is not None and (self.n_batches < 1 or rows % self.n_batches != 0):
            raise ConfigurationError(f"n_batches={self.n_batches} must divide the row count {rows}")
        # builds every component once so that invalid settings fail at load
        self.noise_spec()
        self.solver_config(delta=1.0)

    def row_count(self) -> Optional[int]:
        if self.preset == "integral":
            return self.n
        if self.preset == "ct":
            g = self.radon_geometry()
            return g.n_angles * g.n_detectors
        return None

    def radon_geometry(self) -> RadonGeometry:
        return RadonGeometry(**self.geometry)

    def x_space(self) -> SpaceDescriptor:
        return SpaceDescriptor(self.r_x, self.p)

    def y_space(self) -> SpaceDescriptor:
        return SpaceDescriptor(self.r_y, self.q if self.method == "generalized_kaczmarz" and self.q else self.p)

    def step_schedule(self) -> StepSchedule:
        s = dict(self.schedule)
        kind = s.pop("kind", "epoch_decay")
        if kind == "epoch_decay":
            scale, relative = _parse_scale(s.get("scale", "L_max"))
            return StepSchedule.epoch_decay(scale, relative_to_lmax=relative)
        if kind == "polynomial":
            return StepSchedule.polynomial(float(s.get("mu0", 1.0)), float(s.get("beta", 1.0)))
        if kind == "constant":
            return StepSchedule.constant(float(s.get("mu0", 1.0)))
        raise ConfigurationError(f"unknown schedule kind {kind!r}")

    def stopping_rule(self, delta: float) -> StoppingRule:
        kind = self.stopping.get("kind", "max_epochs")
        if kind == "max_epochs":
            return StoppingRule.max_epochs(self.epochs)
        if kind != "a_priori":
            raise ConfigurationError(f"unknown stopping kind {kind!r}")
        if not delta > 0:
            raise ConfigurationError("a-priori stopping needs noisy data (realised delta > 0)")
        beta = self.stopping.get("beta")
        if beta is None:
            beta = self.schedule.get("beta", 0.0) if self.schedule.get("kind") == "polynomial" else 0.0
        return StoppingRule.a_priori(delta, float(beta), self.p, float(self.stopping.get("theta", 0.9)))

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(**self.noise)

    def phantom_noise_spec(self) -> NoiseSpec:
        """Gaussian noise on the phantom, on its own stream unless phantom_seed is set."""
        seed = self.phantom_seed
        if seed is None:
            sequence = np.random.SeedSequence([self.noise_spec().seed, PHANTOM_STREAM])
            seed = int(sequence.generate_state(1, np.uint64)[0])
        return NoiseSpec(kind="gaussian", sigma=self.phantom_noise, seed=seed)

    def solver_config(self, delta: float, seed: Optional[int] = None) -> SolverConfig:
        return SolverConfig(
            method=self.method,
            x_space=self.x_space(),
            y_space=self.y_space(),
            schedule=self.step_schedule(),
            stopping=self.stopping_rule(delta),
            seed=self.seed if seed is None else seed,
            epochs=self.epochs,
            q=self.q,
        )


def _parse_scale(value) -> tuple[float, bool]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value), False
    text = str(value).replace(" ", "")
    if text == "L_max":
        return 1.0, True
    if text.startswith("L_max/"):
        try:
            return 1.0 / float(text[len("L_max/"):]), True
        except ValueError:
            pass
    raise ConfigurationError(f"schedule scale must be a number, 'L_max' or 'L_max/<d>', got {value!r}")


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if key in SECTION_KEYS and isinstance(value, dict):
            out[key] = {**out.get(key, {}), **value}
        else:
            out[key] = value
    return out


def _check_keys(data: dict):
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    for section, allowed in SECTION_KEYS.items():
        if section not in data:
            continue
        if not isinstance(data[section], dict):
            raise ConfigurationError(f"config section {section!r} must be an object")
        extra = sorted(set(data[section]) - allowed)
        if extra:
            raise ConfigurationError(f"unknown keys in {section!r}: {', '.join(extra)}")


def apply_overrides(data: dict, overrides) -> dict:
    """key=value pairs, dotted keys for sections, values parsed as JSON when possible."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        section, dot, sub = key.partition(".")
        if dot:
            out.setdefault(section, {})
            if not isinstance(out[section], dict):
                raise ConfigurationError(f"{section!r} is not a config section")
            out[section][sub] = value
        else:
            out[key] = value
    return out


def config_from_dict(data: dict, overrides=None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    data = apply_overrides(data, overrides)
    _check_keys(data)
    preset = data.get("preset", "integral")
    if preset not in PRESET_DEFAULTS:
        raise ConfigurationError(f"preset must be one of {PRESETS}, got {preset!r}")
    base = {"schedule": _default_schedule()}
    merged = _merge(_merge(base, PRESET_DEFAULTS[preset]), data)
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigurationError(f"invalid config value: {exc}") from exc


def parse_config(path, overrides=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(data, overrides)


# ─── PROBLEM ──────────────────────────────────────────────────────────────────
@dataclass
class Problem:
    matrix: np.ndarray
    x_true: np.ndarray
    y_clean: np.ndarray


def build_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.preset == "integral":
        a = build_integral_operator(cfg.n, cfg.midpoint_columns)
        x_true = exact_sparse_signal(cfg.n)
        return Problem(a, x_true, a @ x_true)
    if cfg.preset == "ct":
        geom = cfg.radon_geometry()
        a = build_radon_operator(geom)
        x_true = sparse_disk_phantom(geom.grid_side)
        measured = x_true
        if cfg.phantom_noise > 0:
            measured, _ = corrupt(x_true, cfg.phantom_noise_spec(), r_y=2.0)
        return Problem(a, x_true, a @ measured)
    a = read_matrix_csv(cfg.matrix)
    x_true = read_matrix_csv(cfg.signal).reshape(-1)
    if x_true.shape[0] != a.shape[1]:
        raise ConfigurationError(f"signal has length {x_true.shape[0]}, matrix has {a.shape[1]} columns")
    return Problem(a, x_true, a @ x_true)


# ─── ARTIFACTS ────────────────────────────────────────────────────────────────
def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM, min-max scaled, first row at the top."""
    img = np.flipud(np.asarray(image, dtype=float))
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc}") from exc


def plot_convergence(path, summaries: dict, title: str):
    plt.rcParams["svg.hashsalt"] = "banach-sgd"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, summary in summaries.items():
        mean = np.where(summary.mean > 0, summary.mean, np.nan)
        ax.plot(summary.epochs, mean, label=label)
        if summary.n_seeds > 1:
            lower = summary.mean - 2 * summary.stderr
            lower = np.where(lower > 0, lower, np.nan)
            ax.fill_between(summary.epochs, lower, summary.mean + 2 * summary.stderr, alpha=0.2)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise DataFileError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def _single_summary(record, column: str) -> diagnostics.EnsembleSummary:
    values = record.column(column)
    return diagnostics.EnsembleSummary(column, record.column("epoch"), values, np.zeros_like(values), 1)


def _run_all(spec: diagnostics.RunSpec, seeds: list, jobs: int):
    """Yields (seed, result, error) in seed order; a failing seed does not stop the others."""
    if jobs <= 1:
        for seed in seeds:
            try:
                yield seed, diagnostics.run_seed(spec, seed), None
            except (BanachSGDError, ArithmeticError) as exc:
                yield seed, None, exc
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(diagnostics.run_seed, spec, seed) for seed in seeds]
        for seed, fut in zip(seeds, futures):
            try:
                yield seed, fut.result(), None
            except (BanachSGDError, ArithmeticError) as exc:
                yield seed, None, exc


# ─── RUN EXPERIMENT ───────────────────────────────────────────────────────────
def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = DEFAULT_JOBS) -> int:
    out = Path(out_dir)
    print(f"🚀 {cfg.preset} experiment: {cfg.method}, X=l^{cfg.r_x:g}, Y=l^{cfg.r_y:g}, "
          f"{cfg.n_seeds} seed(s) from {cfg.seed}", flush=True)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFileError(f"cannot create {out}: {exc}") from exc

    problem = build_problem(cfg)
    y_delta, delta = corrupt(problem.y_clean, cfg.noise_spec(), r_y=cfg.r_y)
    solver_cfg = cfg.solver_config(delta)
    op = partition_rows(problem.matrix, cfg.n_batches, solver_cfg.y_space)
    obs = observe(op, y_delta, delta)
    print(f"   {op.n_rows} rows in {op.n_blocks} blocks, realised delta = {delta:.6g}", flush=True)

    x_hat = problem.x_true
    if cfg.reference == "minimum_norm":
        x_hat = diagnostics.reference_solution(op, observe(op, problem.y_clean), solver_cfg.x_space)
    context = make_context(op, solver_cfg)
    print(f"   L_max = {context.l_max:.6g}", flush=True)

    spec = diagnostics.RunSpec(op, obs, solver_cfg, problem.x_true, x_hat, context)
    seeds = list(range(cfg.seed, cfg.seed + cfg.n_seeds))
    records, failed, worst = {}, [], EXIT_OK
    final_x = None
    for seed, result, error in _run_all(spec, seeds, jobs):
        if error is None:
            try:
                result.record.validate()
            except BanachSGDError as exc:
                error = exc
        if error is not None:
            print(f"❌ seed {seed} : {error}", flush=True)
            failed.append(seed)
            worst = max(worst, exit_code_for(error))
            continue
        path = out / TRACE_NAME.format(seed=seed)
        result.record.to_csv(path)
        records[seed] = result.record
        if final_x is None:
            final_x = result.state.x
        last = result.record.rows[-1]
        print(f"🧾 {path.name} : objective={last.objective:.4g} bregman={last.bregman:.4g} "
              f"delta1={last.delta1:.4g} delta2={last.delta2:.4g}", flush=True)

    if records:
        ordered = [records[s] for s in sorted(records)]
        if len(ordered) >= 2:
            summaries = {c: diagnostics.summarize(ordered, c) for c in ("objective", "bregman")}
            summaries["bregman"].to_csv(out / ENSEMBLE_NAME)
            print(f"🧾 {ENSEMBLE_NAME}", flush=True)
        else:
            summaries = {c: _single_summary(ordered[0], c) for c in ("objective", "bregman")}
            print("⚠️ a single successful seed: no ensemble mean written", flush=True)
        plot_convergence(out / PLOT_NAME, summaries, f"{cfg.preset} / {cfg.method}")
        np.savetxt(out / f"{RECONSTRUCTION_NAME}.csv", final_x, fmt="%.17g")
        if cfg.preset == "ct":
            g = cfg.radon_geometry().grid_side
            write_pgm(out / f"{RECONSTRUCTION_NAME}.pgm", final_x.reshape(g, g))
        print(f"🧾 {PLOT_NAME}, {RECONSTRUCTION_NAME}.*", flush=True)

    manifest = {
        "config": asdict(cfg),
        "version": __version__,
        "numpy": np.__version__,
        "rng": RNG_ALGORITHM,
        "delta": delta,
        "l_max": context.l_max,
        "seeds": seeds,
        "failed_seeds": failed,
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    try:
        (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise DataFileError(f"cannot write manifest: {exc}") from exc

    ok, ko = len(records), len(failed)
    if ko:
        print(f"⚠️ done: {ok} ok, {ko} failed", flush=True)
    else:
        print(f"✅ done: {ok} seed(s) written to {out}", flush=True)
    return worst


# ─── NORM ESTIMATE ────────────────────────────────────────────────────────────
def norm_estimate_command(path, r_x: float, r_y: float, tol: float = 1e-10, max_iter: int = 1000,
                          seed: int = 0, n_starts: int = 1):
    a = read_matrix_csv(path)
    est = boyd_operator_norm(a, r_x, r_y, tol=tol, max_iter=max_iter, seed=seed, n_starts=n_starts)
    print(f"||A|| l^{r_x:g} -> l^{r_y:g} = {est.value:.10f} ({est.iterations} iterations)", flush=True)
    if not est.converged:
        print(f"⚠️ not converged: max_iter={max_iter} reached", flush=True)
    return est


# ─── ENTRY POINT ──────────────────────────────────────────────────────────────
def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="first seed (overrides the config)")
    p.add_argument("--seeds", type=int, help="number of seeds (overrides the config)")
    p.add_argument("--epochs", type=int, help="epochs (overrides the config)")
    p.add_argument("--jobs", type=int, default=int(os.getenv("BANACH_SGD_JOBS", DEFAULT_JOBS)),
                   help="worker processes (CLI > env:BANACH_SGD_JOBS > 1)")
    p.add_argument("--out-dir", help="output directory (CLI > config > env:BANACH_SGD_OUT_DIR > results)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, dotted keys for sections (e.g. noise.sigma=0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="SGD for linear inverse problems in l^r spaces")
    parser.add_argument("--log-level", default=os.getenv("BANACH_SGD_LOG_LEVEL", DEFAULT_LOG_LEVEL),
                        help="CLI > env:BANACH_SGD_LOG_LEVEL > INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run the experiment described by a JSON config")
    solve.add_argument("config")
    _add_run_flags(solve)

    exp = sub.add_parser("experiment", help="run a preset experiment")
    exp.add_argument("preset", choices=("integral", "ct"))
    _add_run_flags(exp)

    norm = sub.add_parser("norm-estimate", help="Boyd estimate of ||A|| from l^rx to l^ry")
    norm.add_argument("matrix")
    norm.add_argument("--rx", type=float, default=2.0)
    norm.add_argument("--ry", type=float, default=2.0)
    norm.add_argument("--tol", type=float, default=1e-10)
    norm.add_argument("--max-iter", type=int, default=1000)
    norm.add_argument("--seed", type=int, default=0)
    norm.add_argument("--starts", type=int, default=1)
    return parser


def _run_args(args) -> list:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.seeds is not None:
        overrides.append(f"n_seeds={args.seeds}")
    if args.epochs is not None:
        overrides.append(f"epochs={args.epochs}")
    return overrides


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=str(args.log_level).upper(), format="%(message)s")
    try:
        if args.command == "norm-estimate":
            norm_estimate_command(args.matrix, args.rx, args.ry, args.tol, args.max_iter, args.seed, args.starts)
            return EXIT_OK
        if args.command == "solve":
            cfg = parse_config(args.config, _run_args(args))
        else:
            cfg = config_from_dict({"preset": args.preset}, _run_args(args))
        out_dir = args.out_dir or cfg.out_dir or os.getenv("BANACH_SGD_OUT_DIR", DEFAULT_OUT_DIR)
        return run_experiment(cfg, out_dir, jobs=args.jobs)
    except (BanachSGDError, OSError, ArithmeticError) as exc:
        print(f"❌ {exc}", flush=True)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
