"""Residual autocovariances, the bias objective, and its minimizer.

A misspecified filter leaves serial correlation in its residuals.  The
objective J(nu) re-runs the filter at theta - nu and sums the empirical
autocovariances of the chosen residual series over lags 1..h_star; a
Nelder-Mead search over nu returns the bias estimate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import Bounds, minimize

from .filters import FilterError, run_filter
from .statespace import (
    DomainError,
    InadmissibleParameterError,
    ModelSpec,
    ParamVector,
)

__all__ = [
    "AutocovTable",
    "EstimationResult",
    "ObjectiveSpec",
    "OptimizerOptions",
    "WhitenessReport",
    "autocov_table",
    "empirical_autocov",
    "estimate_bias",
    "objective",
    "objective_from_series",
    "whiteness_report",
]


# ======================================================================
# empirical autocovariances
# ======================================================================


def _as_series(series) -> np.ndarray:
    z = np.asarray(series, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2:
        raise ValueError("series must be 1-d or 2-d (n_samples, n_coords)")
    return z


def empirical_autocov(series, lag: int) -> np.ndarray:
    """Coordinatewise empirical autocovariance at one lag.

    Uses the full-sample mean and the fixed normalizer 1/(N-1) at every
    lag.  Requires N > lag + 1 so at least two products enter the sum.
    """
    z = _as_series(series)
    n = z.shape[0]
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    if n <= lag + 1:
        raise ValueError(
            f"series of length {n} too short for lag {lag}; need at least {lag + 2}"
        )
    zc = z - z.mean(axis=0)
    return np.einsum("tj,tj->j", zc[lag:], zc[: n - lag]) / (n - 1)


@dataclass
class AutocovTable:
    """Autocovariances gamma[j, h] for lags h = 0..h_star."""

    gamma: np.ndarray  # (n_coords, h_star + 1)
    n_samples: int
    series_kind: str = ""

    @property
    def h_star(self) -> int:
        return self.gamma.shape[1] - 1

    def to_csv(self, path) -> None:
        m = self.gamma.shape[0]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lag"] + [f"coord_{j + 1}" for j in range(m)])
            for h in range(self.gamma.shape[1]):
                writer.writerow([h] + [repr(float(v)) for v in self.gamma[:, h]])


def autocov_table(series, h_star: int, series_kind: str = "") -> AutocovTable:
    z = _as_series(series)
    if h_star < 1:
        raise ValueError("h_star must be at least 1")
    cols = [empirical_autocov(z, h) for h in range(h_star + 1)]
    return AutocovTable(
        gamma=np.stack(cols, axis=1),
        n_samples=z.shape[0],
        series_kind=series_kind,
    )


# ======================================================================
# objective
# ======================================================================


@dataclass(frozen=True)
class ObjectiveSpec:
    """What to sum: which residual series, how many lags, which variant."""

    h_star: int = 2
    variant: str = "signed"  # "signed" or "squared"
    series: str = "interp"  # "interp" or "innov"

    def __post_init__(self):
        if self.h_star < 1:
            raise ValueError("h_star must be at least 1")
        if self.variant not in ("signed", "squared"):
            raise ValueError(f"unknown objective variant {self.variant!r}")
        if self.series not in ("interp", "innov"):
            raise ValueError(f"unknown residual series {self.series!r}")


def objective_from_series(series, spec: ObjectiveSpec) -> float:
    """Sum of empirical autocovariances over lags 1..h_star (lag 0 excluded)."""
    z = _as_series(series)
    total = 0.0
    for h in range(1, spec.h_star + 1):
        g = empirical_autocov(z, h)
        total += float(np.sum(g * g) if spec.variant == "squared" else np.sum(g))
    return total


def objective(
    model: ModelSpec,
    theta,
    observations,
    nu,
    spec: ObjectiveSpec,
    mode: str = "auto",
) -> float:
    """J(nu): filter the record at theta - nu and sum residual autocovariances.

    Deterministic in (observations, theta - nu, spec).  Filter failures
    propagate with the offending nu attached.
    """
    th = model.theta_array(theta)
    nu_arr = model.theta_array(nu)
    th_run = th - nu_arr
    model.check_admissible(th_run)
    try:
        trace = run_filter(model, th_run, observations, mode=mode)
    except FilterError as exc:
        raise FilterError(f"filter failed at nu={nu_arr.tolist()}: {exc}",
                          step=exc.step) from exc
    series = trace.residuals.by_name(spec.series)
    return objective_from_series(series, spec)


# ======================================================================
# bias estimation
# ======================================================================


@dataclass(frozen=True)
class OptimizerOptions:
    """Knobs for the simplex search in :func:`estimate_bias`.

    ``box_fraction`` may be a scalar or a per-coordinate sequence (one
    entry per theta coordinate).  Coordinates that the residual
    autocovariances identify only weakly -- observation-scale parameters,
    where an overconfident filter shrinks the interpolation residual for
    trivial reasons -- need a box on the order of the bias actually
    suspected, not a generous one.
    """

    max_iter: int = 2000
    xatol: float = 1e-6
    fatol: float = 1e-10
    simplex_scale: float = 0.05
    box_fraction: float | Sequence[float] = 0.5
    penalty: float = 1e12


@dataclass
class EstimationResult:
    epsilon_hat: ParamVector
    theta_hat: ParamVector
    objective_value: float
    iterations: int
    n_evals: int
    converged: bool
    n_penalized: int = 0
    message: str = ""


def _free_indices(model: ModelSpec, free) -> list[int]:
    if free is None:
        return list(range(model.theta_dim))
    idx = []
    for item in free:
        if isinstance(item, str):
            idx.append(model.theta_labels.index(item))
        else:
            idx.append(int(item))
    if not idx:
        raise ValueError("free parameter set must not be empty")
    return idx


def _nu_bounds(model: ModelSpec, th: np.ndarray, idx: list[int],
               box_fraction) -> Bounds:
    # theta - nu is kept inside theta_i +/- box_fraction*|theta_i|,
    # intersected with any hard family bounds.
    frac = np.broadcast_to(np.asarray(box_fraction, dtype=float),
                           (model.theta_dim,))
    if np.any(frac <= 0.0):
        raise ValueError("box_fraction entries must be positive")
    lo = np.empty(len(idx))
    hi = np.empty(len(idx))
    for j, i in enumerate(idx):
        half = frac[i] * (abs(th[i]) if th[i] != 0.0 else 1.0)
        t_lo, t_hi = th[i] - half, th[i] + half
        if model.theta_bounds is not None:
            b_lo, b_hi = model.theta_bounds[i]
            if b_lo is not None:
                t_lo = max(t_lo, b_lo)
            if b_hi is not None:
                t_hi = min(t_hi, b_hi)
        # nu = theta - theta_run
        lo[j] = th[i] - t_hi
        hi[j] = th[i] - t_lo
    return Bounds(lo, hi)


def estimate_bias(
    model: ModelSpec,
    theta,
    observations,
    spec: ObjectiveSpec,
    nu_init=None,
    free: Optional[Sequence] = None,
    options: Optional[OptimizerOptions] = None,
    mode: str = "auto",
) -> EstimationResult:
    """Minimize J over the bias nu by Nelder-Mead.

    The search restricts theta - nu to a box of +/- box_fraction around
    each theta coordinate (tightened by any family bounds); inadmissible
    points and filter failures are penalized rather than fatal.  ``free``
    limits the search to a subset of coordinates (labels or indices),
    holding the remaining entries of nu at zero.
    """
    opts = options or OptimizerOptions()
    th = model.theta_array(theta)
    idx = _free_indices(model, free)
    nu0_full = np.zeros(model.theta_dim) if nu_init is None else model.theta_array(nu_init)
    nu0 = nu0_full[idx]

    n_penalized = 0

    def embed(nu_free: np.ndarray) -> np.ndarray:
        nu = nu0_full.copy()
        nu[idx] = nu_free
        return nu

    def fun(nu_free: np.ndarray) -> float:
        nonlocal n_penalized
        nu = embed(nu_free)
        try:
            return objective(model, th, observations, nu, spec, mode=mode)
        except (FilterError, InadmissibleParameterError, DomainError, FloatingPointError):
            n_penalized += 1
            return opts.penalty * (1.0 + float(np.linalg.norm(nu_free)))

    # Initial simplex: steps of simplex_scale * max(1, |theta_i|) per
    # coordinate, capped so the opening simplex fits inside the search box
    # (for small-magnitude coordinates the uncapped step can exceed the
    # whole box and the search stalls against the penalty wall).
    bounds = _nu_bounds(model, th, idx, opts.box_fraction)
    dim = len(idx)
    simplex = np.tile(nu0, (dim + 1, 1))
    for j, i in enumerate(idx):
        step = opts.simplex_scale * max(1.0, abs(th[i]))
        room_up = bounds.ub[j] - nu0[j]
        room_dn = nu0[j] - bounds.lb[j]
        if room_up >= room_dn:
            simplex[j + 1, j] += min(step, 0.45 * room_up)
        else:
            simplex[j + 1, j] -= min(step, 0.45 * room_dn)

    result = minimize(
        fun,
        nu0,
        method="Nelder-Mead",
        bounds=bounds,
        options={
            "maxiter": opts.max_iter,
            "xatol": opts.xatol,
            "fatol": opts.fatol,
            "initial_simplex": simplex,
            "adaptive": False,
        },
    )

    if result.fun >= opts.penalty:
        raise InadmissibleParameterError(
            "no admissible parameter point found during bias estimation"
        )

    eps_hat = embed(np.asarray(result.x, dtype=float))
    return EstimationResult(
        epsilon_hat=ParamVector(eps_hat, model.theta_labels),
        theta_hat=ParamVector(th - eps_hat, model.theta_labels),
        objective_value=float(result.fun),
        iterations=int(result.nit),
        n_evals=int(result.nfev),
        converged=bool(result.success),
        n_penalized=n_penalized,
        message=str(result.message),
    )


# ======================================================================
# whiteness diagnostics
# ======================================================================


@dataclass
class WhitenessReport:
    """Autocorrelations against the 1.96/sqrt(N) band, per coordinate and lag."""

    rho: np.ndarray  # (n_coords, h_star), lags 1..h_star
    band: float
    flagged: np.ndarray  # boolean, same shape
    degenerate: np.ndarray  # (n_coords,) True where gamma(0) == 0
    n_samples: int

    @property
    def h_star(self) -> int:
        return self.rho.shape[1]

    @property
    def fraction_flagged(self) -> float:
        live = ~self.degenerate
        total = int(live.sum()) * self.h_star
        if total == 0:
            return 0.0
        return float(self.flagged[live].sum()) / total

    def to_csv(self, path) -> None:
        m = self.rho.shape[0]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["coord", "lag", "rho", "band", "flagged", "degenerate"])
            for j in range(m):
                for h in range(self.h_star):
                    writer.writerow(
                        [j + 1, h + 1, repr(float(self.rho[j, h])), repr(self.band),
                         int(self.flagged[j, h]), int(self.degenerate[j])]
                    )


def whiteness_report(series, h_star: int) -> WhitenessReport:
    """Flag |rho(h)| above the two-sided 95% band for white noise."""
    z = _as_series(series)
    table = autocov_table(z, h_star)
    g0 = table.gamma[:, 0]
    degenerate = g0 <= 0.0
    m = z.shape[1]
    rho = np.zeros((m, h_star))
    live = ~degenerate
    rho[live] = table.gamma[live, 1:] / g0[live, None]
    band = 1.96 / np.sqrt(z.shape[0])
    flagged = np.abs(rho) > band
    flagged[degenerate] = False
    return WhitenessReport(
        rho=rho, band=float(band), flagged=flagged,
        degenerate=degenerate, n_samples=z.shape[0],
    )
