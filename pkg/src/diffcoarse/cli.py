"""Command line entry point: ``diffcoarse <subcommand> --config run.json --out DIR``.

Every run writes into a fresh directory that appears atomically: outputs
are staged in a sibling temporary directory and renamed into place only
after the run succeeded, so a failed run leaves nothing behind.
"""

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import stats

from . import __version__, analysis, experiments, families, kinetics, montecarlo, spectral
from .exceptions import (
    AbsorbedStateError,
    CapacityError,
    ConfigError,
    DiffCoarseError,
    DomainError,
    EstimationError,
    SingularityError,
    StepRejectedError,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ABSORBED = 0, 2, 3, 4


# -- config schemas ------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class InitialConfig(_Strict):
    kind: Literal["exponential", "gamma", "polyexp", "expmixture", "halfgaussian", "uniform"]
    lam: Optional[float] = None
    shape: Optional[float] = None
    p: Optional[List[float]] = None
    rates: Optional[List[float]] = None
    weights: Optional[List[float]] = None
    sigma: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None

    def to_spec(self):
        params = {k: v for k, v in self.model_dump().items() if k != "kind" and v is not None}
        return montecarlo.InitialSpec(self.kind, params)


class GridConfig(_Strict):
    x_max: float = Field(40.0, gt=0)
    n_points: int = Field(4001, ge=3)


class SimulateConfig(_Strict):
    schema_version: Literal[1]
    variant: Literal["excess", "difference", "dual"]
    initial: InitialConfig
    n: int = Field(gt=1)
    horizon: float = Field(gt=0)
    checkpoints: List[float] = []
    seeds: List[int] = [0]
    histograms: bool = True


class IntegrateConfig(_Strict):
    schema_version: Literal[1]
    initial: InitialConfig
    grid: GridConfig = GridConfig()
    tau_end: float = Field(gt=0)
    d_tau: float = Field(kinetics.DEFAULT_D_TAU, gt=0)
    observer_stride: int = Field(10, ge=1)
    renormalize: bool = False


class FamilyConfig(_Strict):
    schema_version: Literal[1]
    state: Dict[str, Union[str, float, List[float]]]
    normalize: bool = False
    tau_end: float = Field(gt=0)
    d_tau: float = Field(0.01, gt=0)
    record_every: int = Field(1, ge=1)
    render: Optional[GridConfig] = None


class SpectralConfig(_Strict):
    schema_version: Literal[1]
    charfn: Dict[str, Union[str, float, List[float], List[List[Union[float, List[float]]]]]]
    z_samples: List[float] = [0.0, 1.0, -1.0, 5.0, -5.0]
    epsilon: Optional[float] = Field(None, gt=0)
    k_max: Optional[float] = Field(None, gt=0)
    n_quad: int = Field(20000, ge=100)


class ReportConfig(_Strict):
    schema_version: Literal[1]
    input: str
    initial: Optional[InitialConfig] = None
    window: Optional[Tuple[float, float]] = None


SCHEMAS = {
    "simulate": SimulateConfig,
    "integrate": IntegrateConfig,
    "family": FamilyConfig,
    "spectral": SpectralConfig,
    "report": ReportConfig,
}


def _line_of(text, key):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path, command):
    """Parse and validate a JSON config; raises ConfigError with line numbers."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    try:
        return SCHEMAS[command].model_validate(raw), raw
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            key = next((p for p in reversed(err["loc"]) if isinstance(p, str)), None)
            ln = _line_of(text, key) if key else None
            where = f"{path}:{ln}" if ln else str(path)
            lines.append(f"{where}: {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from exc


# -- artifact writing ----------------------------------------------------------


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _plot(path, data, x, ys, xlabel, ylabel, logx=False, logy=False, title=""):
    _write_json(
        path,
        {
            "data": data,
            "x": x,
            "series": ys,
            "xlabel": xlabel,
            "ylabel": ylabel,
            "xscale": "log" if logx else "linear",
            "yscale": "log" if logy else "linear",
            "title": title,
        },
    )


def _finalize(stage, command, config):
    _write_json(stage / "config.resolved.json", config)
    _write_json(stage / "version.json", {"tool": "diffcoarse", "version": __version__, "command": command})
    lines = []
    for f in sorted(p for p in stage.rglob("*") if p.is_file()):
        digest = hashlib.sha256(f.read_bytes()).hexdigest()
        lines.append(f"{digest}  {f.relative_to(stage).as_posix()}\n")
    (stage / "MANIFEST.sha256").write_text("".join(lines))


class _Artifacts:
    """Staging directory renamed onto ``out`` on success, removed on failure."""

    def __init__(self, out):
        self.out = Path(out).resolve()

    def __enter__(self):
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        self.stage.chmod(0o755)
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.stage, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        os.replace(self.stage, self.out)
        return False


# -- helpers -------------------------------------------------------------------


def initial_density(spec):
    """Density callable for an InitialSpec."""
    p = spec.params
    if spec.kind == "exponential":
        return lambda x: stats.expon.pdf(x, scale=1.0 / p["lam"])
    if spec.kind == "gamma":
        return lambda x: stats.gamma.pdf(x, p["shape"], scale=1.0 / p["lam"])
    if spec.kind == "polyexp":
        w = np.asarray(p["p"], float)
        return lambda x: sum(c * stats.gamma.pdf(x, n + 1, scale=1.0 / p["lam"]) for n, c in enumerate(w))
    if spec.kind == "expmixture":
        return lambda x: sum(
            w * stats.expon.pdf(x, scale=1.0 / r) for r, w in zip(p["rates"], p["weights"])
        )
    if spec.kind == "halfgaussian":
        return lambda x: stats.halfnorm.pdf(x, scale=p["sigma"])
    return lambda x: stats.uniform.pdf(x, p["a"], p["b"] - p["a"])


def _family_state(cfg):
    obj = dict(cfg.state)
    if cfg.normalize:
        if obj.get("family") == "expint":
            lg, f = np.asarray(obj["lambda_grid"], float), np.asarray(obj["f"], float)
            obj["f"] = (f / np.trapezoid(f, lg)).tolist()
        else:
            key = {"polyexp": "p", "laguerre": "A", "expsum": "weights"}.get(obj.get("family"))
            if key:
                v = np.asarray(obj[key], float)
                obj[key] = (v / v.sum()).tolist()
    return families.state_from_json(obj)


def _family_initial(state):
    """InitialSpec describing a family state, for the selection report."""
    if isinstance(state, families.PolyExpCoeffs):
        return montecarlo.InitialSpec.polyexp(state.p, state.lam)
    if isinstance(state, families.ExpMixture):
        return montecarlo.InitialSpec.expmixture(state.rates, state.weights)
    if isinstance(state, families.ExpIntegral):
        return montecarlo.InitialSpec.expmixture(state.lambda_grid, state.as_mixture_weights())
    return None


_EVOLVERS = {
    families.PolyExpCoeffs: (families.poly_exp_evolve, "p"),
    families.LaguerreCoeffs: (families.laguerre_evolve, "A"),
    families.ExpMixture: (families.expmix_evolve, "A"),
    families.ExpIntegral: (families.expintegral_evolve, "f"),
}


def _family_means(state, traj):
    if isinstance(state, families.PolyExpCoeffs):
        return traj @ (np.arange(traj.shape[1]) + 1.0) / state.lam
    if isinstance(state, families.LaguerreCoeffs):
        return traj @ (2.0 * np.arange(traj.shape[1]) + 1.0)
    if isinstance(state, families.ExpMixture):
        return traj @ (1.0 / state.rates)
    return traj @ (state.quadrature_weights / state.lambda_grid)


def _rebuild(state, coeffs):
    if isinstance(state, families.PolyExpCoeffs):
        return families.PolyExpCoeffs(state.lam, coeffs / coeffs.sum())
    if isinstance(state, families.LaguerreCoeffs):
        return families.LaguerreCoeffs.from_coefficients(coeffs)
    if isinstance(state, families.ExpMixture):
        return families.ExpMixture(state.rates, coeffs / coeffs.sum())
    w = state.quadrature_weights
    return families.ExpIntegral(state.lambda_grid, coeffs / (w @ coeffs))


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(cfg, out, seed=None, workers=1):
    spec = cfg.initial.to_spec()
    seeds = [seed] if seed is not None else list(cfg.seeds)
    runs = montecarlo.run_replicas(
        spec, cfg.n, seeds, cfg.variant, cfg.horizon, cfg.checkpoints, workers=workers,
        with_histogram=cfg.histograms,
    )
    with _Artifacts(out) as stage:
        for s, r in zip(seeds, runs):
            d = stage / f"seed_{s}"
            d.mkdir()
            rows = [
                (x.t, x.tau, x.active_fraction, x.mean, x.ks_to_exp, x.lambda_hat, x.lambda_stderr, x.events)
                for x in r.snapshots
            ]
            _write_csv(
                d / "snapshots.csv",
                ["t", "tau", "active_fraction", "mean", "ks_to_exp", "lambda_hat", "lambda_stderr", "events"],
                rows,
            )
            _write_csv(d / "means.csv", ["tau", "mean"], [(x.tau, x.mean) for x in r.snapshots])
            np.save(d / "final_values.npy", r.final.active)
            if cfg.histograms:
                for i, snap in enumerate(r.snapshots):
                    snap.histogram_csv(d / f"histogram_{i:03d}.csv")
            _plot(d / "mean.plot.json", "means.csv", "tau", ["mean"], "tau", "E[x]")
            _plot(d / "active_fraction.plot.json", "snapshots.csv", "t", ["active_fraction"], "t",
                  "active fraction", logx=True, logy=True)
        resolved = cfg.model_dump()
        resolved["seeds"] = seeds
        _finalize(stage, "simulate", resolved)
    return EXIT_OK


def cmd_integrate(cfg, out, seed=None, workers=1):
    spec = cfg.initial.to_spec()
    grid = kinetics.DensityGrid.from_callable(initial_density(spec), cfg.grid.x_max, cfg.grid.n_points)
    residual0 = kinetics.fixed_point_residual(grid)
    series, final = kinetics.evolve(
        grid, cfg.tau_end, cfg.observer_stride, d_tau=cfg.d_tau, renormalize=cfg.renormalize
    )
    with _Artifacts(out) as stage:
        series.to_csv(stage / "moments.csv")
        _write_csv(stage / "means.csv", ["tau", "mean"], zip(series.taus, series.means))
        final.to_csv(stage / "final_density.csv")
        _write_json(stage / "final_density.json", final.to_json())
        _write_json(
            stage / "summary.json",
            {
                "fixed_point_residual_initial": residual0,
                "fixed_point_residual_final": kinetics.fixed_point_residual(final),
                "mass_initial": float(series.moments[0, 0]),
                "mass_final": float(series.moments[-1, 0]),
                "mean_initial": float(series.means[0]),
                "mean_final": float(series.means[-1]),
                "max_negative_excursion": float(min(0.0, series.min_values.min())),
            },
        )
        _plot(stage / "mean.plot.json", "means.csv", "tau", ["mean"], "tau", "E[x]")
        _plot(stage / "density.plot.json", "final_density.csv", "x", ["p"], "x", "p(x)", logy=True)
        _finalize(stage, "integrate", cfg.model_dump())
    return EXIT_OK


def cmd_family(cfg, out, seed=None, workers=1):
    try:
        state = _family_state(cfg)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad family state: {exc}") from exc
    evolve, prefix = _EVOLVERS[type(state)]
    taus, traj = evolve(state, cfg.tau_end, d_tau=cfg.d_tau, record_every=cfg.record_every)
    final = _rebuild(state, traj[-1])
    with _Artifacts(out) as stage:
        families.write_trajectory_csv(stage / "trajectory.csv", taus, traj, prefix)
        _write_csv(stage / "means.csv", ["tau", "mean"], zip(taus, _family_means(state, traj)))
        _write_json(stage / "initial_state.json", families.state_to_json(state))
        _write_json(stage / "final_state.json", families.state_to_json(final))
        if cfg.render is not None:
            spec = families.GridSpec(cfg.render.x_max, cfg.render.n_points)
            families.family_render(final, spec).to_csv(stage / "final_density.csv")
            _plot(stage / "density.plot.json", "final_density.csv", "x", ["p"], "x", "p(x)", logy=True)
        cols = [f"{prefix}{i}" for i in range(min(traj.shape[1], 4))]
        _plot(stage / "trajectory.plot.json", "trajectory.csv", "tau", cols, "tau", "coefficient",
              logx=True, logy=True)
        _finalize(stage, "family", cfg.model_dump())
    return EXIT_OK


def cmd_spectral(cfg, out, seed=None, workers=1):
    cf = spectral.charfn_from_json(dict(cfg.charfn))
    kw = {"n_quad": cfg.n_quad}
    if cfg.epsilon is not None:
        kw["epsilon"] = cfg.epsilon
    if cfg.k_max is not None:
        kw["k_max"] = cfg.k_max
    rows = spectral.defect_scan(cf, cfg.z_samples, **kw)
    sing = spectral.singularity_report(cf)
    with _Artifacts(out) as stage:
        spectral.write_defect_csv(stage / "defect.csv", rows)
        _write_json(
            stage / "summary.json",
            {
                "defect": max(r[3] for r in rows),
                "singularity": {
                    "location": [sing.location.real, sing.location.imag],
                    "kind": sing.kind,
                    "order": sing.order,
                    "mgf_radius": sing.mgf_radius,
                },
                "contour_sign": spectral.contour_sign(),
            },
        )
        _plot(stage / "defect.plot.json", "defect.csv", "z", ["abs_phi", "abs_transform", "defect"], "z", "modulus")
        _finalize(stage, "spectral", cfg.model_dump())
    return EXIT_OK


def _read_means(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["tau"]) for r in rows]), np.array([float(r["mean"]) for r in rows])


def cmd_report(cfg, out, seed=None, workers=1):
    src = Path(cfg.input)
    resolved_path = src / "config.resolved.json"
    if not resolved_path.is_file():
        raise ConfigError(f"{src} is not an artifact directory (no config.resolved.json)")
    prior = json.loads(resolved_path.read_text())
    command = json.loads((src / "version.json").read_text()).get("command")
    means_files = sorted(src.glob("seed_*/means.csv")) or [src / "means.csv"]
    final = None
    if cfg.initial is not None:
        initial = cfg.initial.to_spec()
    elif command in ("simulate", "integrate"):
        initial = InitialConfig(**prior["initial"]).to_spec()
    elif command == "family":
        initial = _family_initial(families.state_from_json(json.loads((src / "initial_state.json").read_text())))
        if initial is None:
            raise ConfigError("laguerre runs need an explicit 'initial' in the report config")
    else:
        raise ConfigError(f"cannot report on a {command!r} run")
    reports = []
    for mf in means_files:
        taus, means = _read_means(mf)
        if command == "simulate" and prior.get("variant") == "dual":
            fv = mf.parent / "final_values.npy"
            final = np.load(fv) if fv.is_file() else None
        rep = analysis.selection_report(initial, taus, means, final=final, window=cfg.window)
        reports.append((mf, taus, means, rep))
    with _Artifacts(out) as stage:
        summary = []
        for i, (mf, taus, means, rep) in enumerate(reports):
            tag = mf.parent.name if mf.parent != src else "run"
            summary.append({"source": str(mf.relative_to(src)), **rep.to_json()})
            dev = np.abs(means - 1.0 / initial.mgf_radius()) if np.isfinite(initial.mgf_radius()) else means
            for fit in (rep.power_fit, rep.exp_fit):
                if fit is None:
                    continue
                name = f"{tag}_fit_{fit.model}.csv"
                lo, hi = fit.window
                sel = (taus >= lo) & (taus <= hi) & (dev > 0)
                _write_csv(stage / name, ["tau", "y", "y_fit"], zip(taus[sel], dev[sel], fit.predict(taus[sel])))
                _plot(stage / f"{tag}_fit_{fit.model}.plot.json", name, "tau", ["y", "y_fit"], "tau",
                      "|E[x] - 1/lam|", logx=fit.model == "power", logy=True)
        _write_json(stage / "report.json", summary)
        _finalize(stage, "report", cfg.model_dump())
    return EXIT_OK


def cmd_reproduce(figure_id, out, seed=None, workers=1):
    ids = list(experiments.EXPERIMENTS) if figure_id == "all" else [figure_id]
    for i in ids:
        if i not in experiments.EXPERIMENTS:
            raise ConfigError(f"unknown experiment {i!r}; choose from all, {', '.join(experiments.EXPERIMENTS)}")
    results = []
    for i in ids:
        kw = {}
        if seed is not None and i == "gamma-selection":
            kw["seed"] = seed
        if i == "density-decay":
            kw["workers"] = workers
            if seed is not None:
                kw["seeds"] = range(seed, seed + 10)
        results.append(experiments.run_experiment(i, **kw))
    with _Artifacts(out) as stage:
        for res in results:
            d = stage / res.id if len(results) > 1 else stage
            d.mkdir(exist_ok=True)
            for name, (header, rows) in res.tables.items():
                _write_csv(d / f"{name}.csv", header, rows)
                if len(header) >= 2:
                    _plot(d / f"{name}.plot.json", f"{name}.csv", header[0], list(header[1:]), header[0], res.title)
            summary = res.summary()
            summary.pop("runtime_s")
            _write_json(d / "result.json", summary)
        _finalize(stage, "reproduce", {"experiments": ids, "seed": seed})
    for res in results:
        for c in res.checks:
            print(f"{res.id}: {c.line()}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "integrate": cmd_integrate,
    "family": cmd_family,
    "spectral": cmd_spectral,
    "report": cmd_report,
}


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="diffcoarse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"diffcoarse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "reproduce"):
        p = sub.add_parser(name)
        if name == "reproduce":
            p.add_argument("figure_id", help="experiment id or 'all'")
            p.add_argument("--config", help="ignored; experiments are canned")
        else:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=_u64, default=None)
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args.figure_id, args.out, args.seed, args.workers)
        cfg, _ = load_config(args.config, args.command)
        return COMMANDS[args.command](cfg, args.out, args.seed, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AbsorbedStateError as exc:
        print(f"absorbed: {exc}", file=sys.stderr)
        return EXIT_ABSORBED
    except (StepRejectedError, EstimationError, CapacityError, SingularityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DomainError as exc:
        # parameters that parse but describe no valid object
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DiffCoarseError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
