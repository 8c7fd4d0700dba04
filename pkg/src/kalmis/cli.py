"""Command-line front end: simulate, filter, detect, estimate, compare.

Configuration is YAML with sections mirroring the library layout::

    preset: ar1-mse             # optional starting point

    model:
      family: ar1               # ar1 | sqrt | heston
      theta_true: [0.9, 3.0]
      options: {}               # forwarded to the family builder

    experiment:
      theta_start: [0.8, 2.8]
      n_steps: 500
      mc_runs: 100
      h_star: 2
      variant: squared          # signed | squared
      series: interp            # interp | innov
      seed: 2
      free: [gamma]

    optimizer:
      box_fraction: 0.5         # scalar or per-coordinate list

Every output directory receives a ``manifest.json`` holding the resolved
configuration, the seed and the artifact list; passing that manifest back
as ``--config`` replays the run.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure, 4 a Monte Carlo run lost too many replicates
to be trusted.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import yaml

import numpy as np

from . import __version__
from .experiments import (
    ExperimentConfig,
    compare_series,
    preset,
    preset_names,
    run_mc,
    sensitivity_sweep,
)
from .filters import FilterError, run_filter
from .residuals import (
    ObjectiveSpec,
    OptimizerOptions,
    autocov_table,
    estimate_bias,
    whiteness_report,
)
from .statespace import DomainError, InadmissibleParameterError, simulate

__all__ = ["ConfigError", "load_config", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INVALID_RUN = 4


class ConfigError(Exception):
    """A configuration file that parses but does not describe a run."""


# ======================================================================
# configuration loading
# ======================================================================

_EXPERIMENT_KEYS = {
    "theta_start", "n_steps", "mc_runs", "h_star", "variant", "series",
    "seed", "init_jitter", "free", "mode", "gaussian_x0",
}
_OPTIMIZER_KEYS = {f.name for f in dataclasses.fields(OptimizerOptions)}


def _section(data: dict, name: str) -> dict:
    part = data.get(name) or {}
    if not isinstance(part, dict):
        raise ConfigError(
            f"'{name}' must be a mapping, got {type(part).__name__}"
        )
    return dict(part)


def _config_from_dict(data: dict, origin: str) -> ExperimentConfig:
    cfg = preset(data["preset"]) if "preset" in data else None

    model = _section(data, "model")
    exper = _section(data, "experiment")
    optim = _section(data, "optimizer")

    unknown = set(exper) - _EXPERIMENT_KEYS
    if unknown:
        raise ConfigError(
            f"{origin}: unknown [experiment] keys {sorted(unknown)}"
        )
    unknown = set(optim) - _OPTIMIZER_KEYS
    if unknown:
        raise ConfigError(f"{origin}: unknown [optimizer] keys {sorted(unknown)}")

    if cfg is None:
        for key in ("family", "theta_true"):
            if key not in model:
                raise ConfigError(
                    f"{origin}: [model] needs '{key}' when no preset is named"
                )
        kwargs = {
            "family": model["family"],
            "theta_true": tuple(model["theta_true"]),
            "theta_start": tuple(
                exper.get("theta_start", model["theta_true"])
            ),
            "model_options": _section(model, "options"),
        }
    else:
        kwargs = {}
        if "family" in model:
            kwargs["family"] = model["family"]
        if "theta_true" in model:
            kwargs["theta_true"] = tuple(model["theta_true"])
        if "options" in model:
            kwargs["model_options"] = _section(model, "options")

    for key in _EXPERIMENT_KEYS & set(exper):
        val = exper[key]
        if key in ("theta_start", "free"):
            val = tuple(val)
        kwargs[key] = val
    if optim:
        base = dataclasses.asdict(cfg.optimizer) if cfg else {}
        base.update(optim)
        if isinstance(base.get("box_fraction"), list):
            base["box_fraction"] = tuple(base["box_fraction"])
        kwargs["optimizer"] = OptimizerOptions(**base)

    try:
        if cfg is None:
            return ExperimentConfig(**kwargs)
        return dataclasses.replace(cfg, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Read an experiment description from YAML or from a run manifest."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".json":
        manifest = json.loads(p.read_text())
        try:
            return _experiment_from_manifest(manifest)
        except KeyError as exc:
            raise ConfigError(f"{p}: manifest missing field {exc}") from exc
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return _config_from_dict(data, str(p))


def _experiment_from_manifest(manifest: dict) -> ExperimentConfig:
    raw = dict(manifest["config"])
    raw["theta_true"] = tuple(raw["theta_true"])
    raw["theta_start"] = tuple(raw["theta_start"])
    if raw.get("free") is not None:
        raw["free"] = tuple(raw["free"])
    raw["optimizer"] = OptimizerOptions(**{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in raw["optimizer"].items()
    })
    return ExperimentConfig(**raw)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "hstar", None) is not None:
        changes["h_star"] = args.hstar
    if getattr(args, "mc", None) is not None:
        changes["mc_runs"] = args.mc
    if getattr(args, "n", None) is not None:
        changes["n_steps"] = args.n
    if getattr(args, "objective", None) is not None:
        changes["variant"] = args.objective
    if getattr(args, "series", None) is not None:
        changes["series"] = args.series
    if not changes:
        return cfg
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve(args) -> ExperimentConfig:
    if getattr(args, "preset", None):
        cfg = preset(args.preset)
    elif getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        raise ConfigError("either --config or --preset is required")
    return _apply_overrides(cfg, args)


# ======================================================================
# artifact helpers
# ======================================================================


def _write_manifest(out: Path, subcommand: str, cfg, outputs,
                    inputs=()) -> None:
    manifest = {
        "subcommand": subcommand,
        "tool": "kalmis",
        "version": __version__,
        "seed": cfg.seed if cfg is not None else None,
        "config": cfg.as_dict() if cfg is not None else None,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _write_series_csv(path: Path, header, rows) -> None:
    # first column is the integer time index, the rest are floats
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            vals = np.atleast_1d(row)
            writer.writerow([int(vals[0])]
                            + [repr(float(v)) for v in vals[1:]])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_trajectory(traj_dir: Path):
    """Rebuild (model, config, observations, exog) from a simulate run."""
    manifest_path = traj_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {traj_dir}")
    manifest = json.loads(manifest_path.read_text())
    cfg = _experiment_from_manifest(manifest)
    obs = np.loadtxt(traj_dir / "observations.csv", delimiter=",", skiprows=1,
                     ndmin=2)[:, 1:]
    exog_path = traj_dir / "exog.csv"
    exog = None
    if exog_path.exists():
        exog = np.loadtxt(exog_path, delimiter=",", skiprows=1, ndmin=2)[:, 1:]
    model = cfg.build()
    if exog is not None:
        model = model.with_exog(exog)
    return model, cfg, obs


def _parse_theta(text: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.split(",")])
    except ValueError as exc:
        raise ConfigError(f"--theta expects comma-separated floats: {exc}")


# ======================================================================
# subcommands
# ======================================================================


def _cmd_simulate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    model = cfg.build()
    traj = simulate(model, np.asarray(cfg.theta_true, float), cfg.n_steps,
                    seed=(cfg.seed, 0), gaussian_x0=cfg.gaussian_x0)
    m, n = traj.obs_dim, traj.state_dim
    files = []
    obs_path = out / "observations.csv"
    _write_series_csv(
        obs_path, ["t"] + [f"y{j+1}" for j in range(m)],
        [np.concatenate([[t + 1], row]) for t, row in
         enumerate(traj.observations)],
    )
    files.append(obs_path)
    states_path = out / "states.csv"
    _write_series_csv(
        states_path, ["t"] + [f"x{j+1}" for j in range(n)],
        [np.concatenate([[t], row]) for t, row in enumerate(traj.states)],
    )
    files.append(states_path)
    if traj.exog is not None:
        exog_path = out / "exog.csv"
        ex = np.atleast_2d(np.asarray(traj.exog, float).T).T
        _write_series_csv(
            exog_path, ["t"] + [f"s{j+1}" for j in range(ex.shape[1])],
            [np.concatenate([[t], row]) for t, row in enumerate(ex)],
        )
        files.append(exog_path)
    _write_manifest(out, "simulate", cfg, files)
    print(f"wrote {cfg.n_steps}-step trajectory to {out}")
    return EXIT_OK


def _cmd_filter(args) -> int:
    model, cfg, obs = _load_trajectory(Path(args.traj))
    theta = _parse_theta(args.theta) if args.theta else np.asarray(
        cfg.theta_start, float)
    out = _out_dir(args)
    trace = run_filter(model, theta, obs, mode=cfg.mode)
    files = []
    for name, series in (("interpolation", trace.residuals.interp),
                         ("innovation", trace.residuals.innov),
                         ("state_estimate", trace.x_post)):
        path = out / f"{name}.csv"
        body = np.atleast_2d(series)
        _write_series_csv(
            path, ["t"] + [f"c{j+1}" for j in range(body.shape[1])],
            [np.concatenate([[t], row]) for t, row in enumerate(body)],
        )
        files.append(path)
    _write_manifest(out, "filter", cfg, files, inputs=[args.traj])
    print(f"filtered {obs.shape[0]} observations at theta="
          f"{np.array2string(theta, precision=6)} -> {out}")
    return EXIT_OK


def _cmd_detect(args) -> int:
    if args.hstar is None or args.hstar < 1:
        raise ConfigError("detect needs --hstar >= 1")
    model, cfg, obs = _load_trajectory(Path(args.traj))
    if obs.shape[0] < args.hstar + 2:
        raise ConfigError(
            f"trajectory too short ({obs.shape[0]}) for h*={args.hstar}"
        )
    theta = _parse_theta(args.theta) if args.theta else np.asarray(
        cfg.theta_start, float)
    out = _out_dir(args)
    trace = run_filter(model, theta, obs, mode=cfg.mode)
    series = (trace.residuals.innov if args.series == "innov"
              else trace.residuals.interp)
    report = whiteness_report(series, args.hstar)
    table = autocov_table(series, args.hstar)
    files = [out / "whiteness.csv", out / "autocov.csv"]
    report.to_csv(files[0])
    table.to_csv(files[1])
    for j in range(report.rho.shape[0]):
        path = out / f"autocorr_coord{j+1}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lag", "rho", "band", "flagged"])
            for h in range(report.h_star):
                writer.writerow([h + 1, repr(float(report.rho[j, h])),
                                 repr(report.band),
                                 int(report.flagged[j, h])])
        files.append(path)
    _write_manifest(out, "detect", cfg, files, inputs=[args.traj])
    print(f"flagged {report.fraction_flagged:.1%} of "
          f"{report.rho.size} (coordinate, lag) cells "
          f"(band +/-{report.band:.3f})")
    return EXIT_OK


def _cmd_estimate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    model = cfg.build()
    traj = simulate(model, np.asarray(cfg.theta_true, float), cfg.n_steps,
                    seed=(cfg.seed, 0), gaussian_x0=cfg.gaussian_x0)
    fitted = model if traj.exog is None else model.with_exog(traj.exog)
    result = estimate_bias(
        fitted, np.asarray(cfg.theta_start, float), traj.observations,
        cfg.objective_spec(), free=cfg.free, options=cfg.optimizer,
        mode=cfg.mode,
    )
    payload = {
        "labels": list(model.theta_labels),
        "theta_hat": [float(v) for v in result.theta_hat.values],
        "epsilon_hat": [float(v) for v in result.epsilon_hat.values],
        "objective_value": result.objective_value,
        "iterations": result.iterations,
        "n_evals": result.n_evals,
        "converged": result.converged,
        "message": result.message,
    }
    result_path = out / "estimate.json"
    result_path.write_text(json.dumps(payload, indent=2) + "\n")
    _write_manifest(out, "estimate", cfg, [result_path])
    pretty = ", ".join(
        f"{lab}={val:.6g}"
        for lab, val in zip(model.theta_labels, result.theta_hat.values)
    )
    print(f"theta_hat: {pretty}")
    print(f"objective at the optimum: {result.objective_value:.6g} "
          f"({result.n_evals} evaluations, converged={result.converged})")
    return EXIT_OK


def _cmd_mc(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    report = run_mc(cfg, threads=args.threads)
    files = [out / "replicates.csv", out / "summary.txt"]
    report.to_csv(files[0])
    files[1].write_text(report.summary() + "\n")
    _write_manifest(out, "mc", cfg, files)
    print(report.summary())
    if not report.valid:
        print(f"run invalid: excluded {len(report.excluded)} of "
              f"{cfg.mc_runs} replicates", file=sys.stderr)
        return EXIT_INVALID_RUN
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    values = [int(v) for v in args.values.split(",")]
    table = sensitivity_sweep(cfg, args.axis, values, threads=args.threads)
    path = out / "sweep.csv"
    table.to_csv(path)
    _write_manifest(out, "sweep", cfg, [path])
    labels = table.reports[0].labels
    for v, rep in zip(table.values, table.reports):
        mse = " ".join(f"{lab}={x:.4g}" for lab, x in zip(labels, rep.mse))
        print(f"{args.axis}={v}: mse {mse}")
    if not all(r.valid for r in table.reports):
        return EXIT_INVALID_RUN
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args)
    comparison = compare_series(cfg, threads=args.threads)
    files = [out / "interp.csv", out / "innov.csv", out / "comparison.csv"]
    comparison.interp.to_csv(files[0])
    comparison.innov.to_csv(files[1])
    with open(files[2], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["coord", "mse_interp", "mse_innov", "ratio"])
        for j, lab in enumerate(comparison.interp.labels):
            writer.writerow([lab, repr(float(comparison.interp.mse[j])),
                             repr(float(comparison.innov.mse[j])),
                             repr(float(comparison.mse_ratio[j]))])
    _write_manifest(out, "compare", cfg, files)
    print(comparison.summary())
    if not (comparison.interp.valid and comparison.innov.valid):
        return EXIT_INVALID_RUN
    return EXIT_OK


def _cmd_print_config(args) -> int:
    if args.preset:
        cfg = preset(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        lines = ["available presets:"]
        lines += [f"  {name}" for name in preset_names()]
        print("\n".join(lines))
        return EXIT_OK
    cfg = _apply_overrides(cfg, args)
    print(_to_yaml(cfg), end="")
    return EXIT_OK


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _to_yaml(cfg: ExperimentConfig) -> str:
    experiment = {
        "theta_start": _plain(cfg.theta_start),
        "n_steps": cfg.n_steps,
        "mc_runs": cfg.mc_runs,
        "h_star": cfg.h_star,
        "variant": cfg.variant,
        "series": cfg.series,
        "seed": cfg.seed,
        "init_jitter": cfg.init_jitter,
        "mode": cfg.mode,
        "gaussian_x0": cfg.gaussian_x0,
    }
    if cfg.free is not None:
        experiment["free"] = _plain(cfg.free)
    doc = {
        "model": {
            "family": cfg.family,
            "theta_true": _plain(cfg.theta_true),
            "options": _plain(cfg.model_options),
        },
        "experiment": experiment,
        "optimizer": _plain(dataclasses.asdict(cfg.optimizer)),
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


# ======================================================================
# argument parsing
# ======================================================================


def _add_config_args(p, with_overrides=True):
    p.add_argument("--config", help="YAML config or manifest.json to replay")
    p.add_argument("--preset", help="named built-in configuration")
    if with_overrides:
        p.add_argument("--seed", type=int)
        p.add_argument("--hstar", type=int)
        p.add_argument("--mc", type=int)
        p.add_argument("--n", type=int)
        p.add_argument("--objective", choices=["signed", "squared"])
        p.add_argument("--series", choices=["interp", "innov"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kalmis",
        description=(
            "Simulate state-space models, filter them under biased "
            "parameters, detect the bias from residual autocorrelation "
            "and estimate it away."
        ),
    )
    parser.add_argument("--version", action="version",
                        version=f"kalmis {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample one trajectory to CSV")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("filter", help="run the (extended) Kalman filter "
                                      "over a stored trajectory")
    p.add_argument("--traj", required=True,
                   help="directory written by `kalmis simulate`")
    p.add_argument("--theta", help="comma-separated parameter vector "
                                   "(default: the stored start point)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_filter)

    p = sub.add_parser("detect", help="whiteness report for the residuals "
                                      "of a (possibly biased) filter run")
    p.add_argument("--traj", required=True)
    p.add_argument("--theta")
    p.add_argument("--hstar", type=int, required=True)
    p.add_argument("--series", choices=["interp", "innov"],
                   default="interp")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_detect)

    p = sub.add_parser("estimate", help="single bias-correction run")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_estimate)

    p = sub.add_parser("mc", help="Monte Carlo estimation study")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_mc)

    p = sub.add_parser("sweep", help="re-run a study along one axis")
    _add_config_args(p)
    p.add_argument("--axis", choices=["lag", "sample_size"], required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated grid, e.g. 2,6,8,10")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("compare", help="paired interpolation-vs-innovation "
                                       "estimation on identical data")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("print-config",
                       help="show a preset or resolved config as YAML")
    _add_config_args(p)
    p.set_defaults(fn=_cmd_print_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, InadmissibleParameterError) as exc:
        # inadmissible parameters always arrive via user configuration
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        # unknown preset names surface here
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterError, DomainError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
