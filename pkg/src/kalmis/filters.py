"""Kalman filtering with per-step relinearization and residual tracking.

The filter runs the standard predict/update recursion.  In ``ekf`` mode
the affine coefficients are refreshed every step (transition linearized
at the previous posterior mean, observation at the current prediction);
in ``kf`` mode the family must be linear, in which case the coefficients
are constants and both modes produce identical output.

Two residual series are recorded per run: the innovation
``y_t - (d_t + C_t x_pred_t)`` and the interpolation residual
``y_t - (d_t + C_t x_post_t)``, both using the step's own linearization.
When the true states are supplied, the filter error
``e_t = x_t - x_post_t`` is recorded as well.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .statespace import ModelSpec

__all__ = [
    "FilterError",
    "FilterStep",
    "FilterTrace",
    "ResidualSeries",
    "kalman_step",
    "run_filter",
]


class FilterError(RuntimeError):
    """Numerical failure inside a filter run."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class FilterStep:
    """Filter state after the update at time ``t``."""

    t: int
    x_pred: np.ndarray
    x_post: np.ndarray
    P_pred: np.ndarray
    P_post: np.ndarray
    K: np.ndarray


@dataclass
class ResidualSeries:
    """Per-step residuals of one filter pass (rows t = 1..N)."""

    innov: np.ndarray
    interp: np.ndarray
    error: Optional[np.ndarray] = None

    def by_name(self, kind: str) -> np.ndarray:
        if kind == "innov":
            return self.innov
        if kind == "interp":
            return self.interp
        if kind == "error":
            if self.error is None:
                raise ValueError("no true states were supplied to the filter")
            return self.error
        raise ValueError(f"unknown residual kind {kind!r}")


@dataclass
class FilterTrace:
    """Complete record of one filter pass.

    Arrays are indexed 0..N with row 0 holding the initial condition
    (x_pred[0] == x_post[0] == the prior mean); ``gains[0]`` is zero.
    """

    model_name: str
    mode: str
    theta: np.ndarray
    x_pred: np.ndarray
    x_post: np.ndarray
    P_pred: np.ndarray
    P_post: np.ndarray
    gains: np.ndarray
    residuals: ResidualSeries

    @property
    def n_steps(self) -> int:
        return self.x_pred.shape[0] - 1

    def step(self, t: int) -> FilterStep:
        return FilterStep(
            t=t,
            x_pred=self.x_pred[t],
            x_post=self.x_post[t],
            P_pred=self.P_pred[t],
            P_post=self.P_post[t],
            K=self.gains[t],
        )

    def to_csv(self, path) -> None:
        n = self.x_pred.shape[1]
        m = self.residuals.innov.shape[1]
        header = ["t"]
        header += [f"x_pred_{i + 1}" for i in range(n)]
        header += [f"x_post_{i + 1}" for i in range(n)]
        header += [f"P_post_{i + 1}{i + 1}" for i in range(n)]
        header += [f"innov_{j + 1}" for j in range(m)]
        header += [f"interp_{j + 1}" for j in range(m)]
        if self.residuals.error is not None:
            header += [f"error_{i + 1}" for i in range(n)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(self.n_steps + 1):
                row: list = [t]
                row += [repr(float(v)) for v in self.x_pred[t]]
                row += [repr(float(v)) for v in self.x_post[t]]
                row += [repr(float(self.P_post[t, i, i])) for i in range(n)]
                if t == 0:
                    row += [""] * (2 * m)
                    if self.residuals.error is not None:
                        row += [""] * n
                else:
                    row += [repr(float(v)) for v in self.residuals.innov[t - 1]]
                    row += [repr(float(v)) for v in self.residuals.interp[t - 1]]
                    if self.residuals.error is not None:
                        row += [repr(float(v)) for v in self.residuals.error[t - 1]]
                writer.writerow(row)


# ======================================================================
# single predict/update step
# ======================================================================


def kalman_step(prev: FilterStep, y, A, C, u, d, Q, R, joseph: bool = False) -> FilterStep:
    """One predict/update cycle from the previous posterior.

    Covariances are symmetrized after each update; the innovation
    covariance is factorized by Cholesky and a failure there raises
    :class:`FilterError` naming the step.
    """
    A = np.atleast_2d(A)
    C = np.atleast_2d(C)
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    u = np.asarray(u, dtype=float).reshape(-1)
    d = np.asarray(d, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    t = prev.t + 1

    x_pred = u + A @ prev.x_post
    P_pred = A @ prev.P_post @ A.T + Q
    P_pred = 0.5 * (P_pred + P_pred.T)

    S = C @ P_pred @ C.T + R
    S = 0.5 * (S + S.T)
    try:
        factor = cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise FilterError(
            f"innovation covariance not positive definite at step {t}", step=t
        ) from exc
    K = cho_solve(factor, C @ P_pred).T

    n = x_pred.size
    IKC = np.eye(n) - K @ C
    x_post = IKC @ x_pred + K @ (y - d)
    if joseph:
        P_post = IKC @ P_pred @ IKC.T + K @ R @ K.T
    else:
        P_post = IKC @ P_pred
    P_post = 0.5 * (P_post + P_post.T)

    return FilterStep(t=t, x_pred=x_pred, x_post=x_post, P_pred=P_pred,
                      P_post=P_post, K=K)


# ======================================================================
# full pass
# ======================================================================


def run_filter(
    model: ModelSpec,
    theta,
    observations,
    mode: str = "auto",
    truth=None,
    p0=None,
    joseph: bool = False,
) -> FilterTrace:
    """Filter a whole observation record at parameter ``theta``.

    Args:
        mode: "kf" (linear families only), "ekf", or "auto" which picks
            "kf" for linear families and "ekf" otherwise.
        truth: optional true states (N+1, n); enables the error series.
        p0: initial prior covariance.  Defaults to the model's x0_cov, or
            to Q(theta, x0_mean) when the initial state is deterministic,
            so the prior never starts degenerate.
    """
    th = model.theta_array(theta)
    if mode == "auto":
        mode = "kf" if model.linear else "ekf"
    if mode not in ("kf", "ekf"):
        raise ValueError(f"unknown filter mode {mode!r}")
    if mode == "kf" and not model.linear:
        raise ValueError(f"family {model.name!r} is nonlinear; use ekf mode")

    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    n_steps, m = obs.shape
    if m != model.obs_dim:
        raise ValueError(
            f"observations have dimension {m}, model expects {model.obs_dim}"
        )
    if not np.all(np.isfinite(obs)):
        bad = int(np.argwhere(~np.isfinite(obs).all(axis=1))[0, 0])
        raise FilterError(
            f"observations contain non-finite values (first at step {bad + 1})",
            step=bad + 1,
        )
    n = model.state_dim
    if model.exog is not None and len(model.exog) < n_steps + 1:
        raise ValueError("exogenous context shorter than the observation record")

    if truth is not None:
        truth = np.atleast_2d(np.asarray(truth, dtype=float))
        if truth.shape != (n_steps + 1, n):
            raise ValueError("truth must have shape (n_steps + 1, state_dim)")

    x0 = model.x0_mean.copy()
    if p0 is None:
        P0 = model.x0_cov if np.any(model.x0_cov) else model.Q(th, x0)
    else:
        P0 = np.asarray(p0, dtype=float).reshape(n, n)

    if model.fast is not None and n == 1 and m == 1 and model.exog is None:
        return _run_filter_scalar(model, th, obs, mode, truth, x0, P0, joseph)

    x_pred = np.empty((n_steps + 1, n))
    x_post = np.empty((n_steps + 1, n))
    P_pred = np.empty((n_steps + 1, n, n))
    P_post = np.empty((n_steps + 1, n, n))
    gains = np.zeros((n_steps + 1, n, m))
    innov = np.empty((n_steps, m))
    interp = np.empty((n_steps, m))
    error = np.empty((n_steps, n)) if truth is not None else None

    x_pred[0] = x_post[0] = x0
    P_pred[0] = P_post[0] = P0

    R = model.R(th)
    step = FilterStep(t=0, x_pred=x0, x_post=x0, P_pred=P0, P_post=P0,
                      K=np.zeros((n, m)))
    for t in range(1, n_steps + 1):
        x_prev = step.x_post
        A_t = np.atleast_2d(model.A(th, x_prev))
        u_t = np.asarray(model.b(th, x_prev), dtype=float).reshape(-1) - A_t @ x_prev
        Q_t = model.Q(th, x_prev)
        s_t = model.exog_at(t)

        x_pr = u_t + A_t @ x_prev
        C_t = np.atleast_2d(model.C(th, x_pr, s_t))
        d_t = np.asarray(model.h(th, x_pr, s_t), dtype=float).reshape(-1) - C_t @ x_pr

        step = kalman_step(step, obs[t - 1], A_t, C_t, u_t, d_t, Q_t, R,
                           joseph=joseph)
        x_pred[t] = step.x_pred
        x_post[t] = step.x_post
        P_pred[t] = step.P_pred
        P_post[t] = step.P_post
        gains[t] = step.K
        innov[t - 1] = obs[t - 1] - (d_t + C_t @ step.x_pred)
        interp[t - 1] = obs[t - 1] - (d_t + C_t @ step.x_post)
        if error is not None:
            error[t - 1] = truth[t] - step.x_post

    return FilterTrace(
        model_name=model.name,
        mode=mode,
        theta=th,
        x_pred=x_pred,
        x_post=x_post,
        P_pred=P_pred,
        P_post=P_post,
        gains=gains,
        residuals=ResidualSeries(innov=innov, interp=interp, error=error),
    )


def _run_filter_scalar(model, th, obs, mode, truth, x0, P0, joseph):
    # Hot path for n = m = 1 families: identical recursion on plain floats.
    fns = model.fast
    theta = tuple(th)
    n_steps = obs.shape[0]
    y = obs[:, 0]

    sig = fns.sigma(theta)
    r = sig * sig

    x = float(x0[0])
    p = float(P0[0, 0])
    xs_pred = [x]
    xs_post = [x]
    ps_pred = [p]
    ps_post = [p]
    ks = [0.0]
    innov = []
    interp = []
    error = [] if truth is not None else None

    for t in range(1, n_steps + 1):
        a = fns.A(theta, x)
        bx = fns.b(theta, x)
        u = bx - a * x
        bet = fns.beta(theta, x)
        x_pr = u + a * x
        p_pr = a * p * a + bet * bet

        c = fns.C(theta, x_pr)
        hx = fns.h(theta, x_pr)
        d = hx - c * x_pr

        s = c * p_pr * c + r
        if not s > 0.0:
            raise FilterError(
                f"innovation covariance not positive definite at step {t}",
                step=t,
            )
        k = p_pr * c / s
        resid_pred = y[t - 1] - (d + c * x_pr)
        x = x_pr + k * resid_pred
        if joseph:
            ikc = 1.0 - k * c
            p = ikc * p_pr * ikc + k * r * k
        else:
            p = (1.0 - k * c) * p_pr

        xs_pred.append(x_pr)
        xs_post.append(x)
        ps_pred.append(p_pr)
        ps_post.append(p)
        ks.append(k)
        innov.append(resid_pred)
        interp.append(y[t - 1] - (d + c * x))
        if error is not None:
            error.append(truth[t, 0] - x)

    shape3 = (n_steps + 1, 1, 1)
    return FilterTrace(
        model_name=model.name,
        mode=mode,
        theta=th,
        x_pred=np.array(xs_pred)[:, None],
        x_post=np.array(xs_post)[:, None],
        P_pred=np.array(ps_pred).reshape(shape3),
        P_post=np.array(ps_post).reshape(shape3),
        gains=np.array(ks).reshape(shape3),
        residuals=ResidualSeries(
            innov=np.array(innov)[:, None],
            interp=np.array(interp)[:, None],
            error=None if error is None else np.array(error)[:, None],
        ),
    )
