"""Nonlinear scalar family with a square-root drift and direct observation.

    x_t = alpha sqrt(x_{t-1} - gamma) + beta eta_t
    y_t = x_t + sigma eps_t

theta = (gamma, alpha).  The drift is defined for x > gamma only; direct
evaluation below that raises, while simulation clamps the argument at a
tiny floor and counts how often the clamp fired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..statespace import (
    DomainError,
    ModelSpec,
    ScalarModelFns,
    Trajectory,
    _seed_record,
)

__all__ = ["SqrtDriftParams", "make_sqrt_drift"]

_CLAMP = 1e-12


@dataclass(frozen=True)
class SqrtDriftParams:
    gamma: float
    alpha: float
    beta_sq: float = 0.1
    sigma_sq: float = 0.2
    x0_mean: float | None = None  # default: the drift's upper fixed point

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta_sq < 0.0 or self.sigma_sq < 0.0:
            raise ValueError("noise variances must be nonnegative")

    def fixed_point(self) -> float:
        """Larger root of x = alpha sqrt(x - gamma)."""
        a2 = self.alpha**2
        disc = a2 * a2 - 4.0 * a2 * self.gamma
        if disc <= 0.0:
            raise ValueError("drift has no real fixed point for these parameters")
        return 0.5 * (a2 + math.sqrt(disc))


def _root(th, x: float) -> float:
    arg = x - th[0]
    if arg <= 0.0:
        raise DomainError(
            f"sqrt drift needs x > gamma; got x={x:.6g}, gamma={th[0]:.6g}"
        )
    return math.sqrt(arg)


def _admissible(theta: np.ndarray):
    if theta[1] <= 0.0:
        return f"alpha must be positive, got {theta[1]:.6g}"
    return None


def _simulate(model, th, n_steps, root_ss, gaussian_x0, store_noise):
    init_ss, state_ss, obs_ss = root_ss.spawn(3)
    x = float(model.x0_mean[0])
    if gaussian_x0 and model.x0_cov[0, 0] > 0.0:
        x += math.sqrt(model.x0_cov[0, 0]) * float(
            np.random.default_rng(init_ss).standard_normal()
        )
    eta = np.random.default_rng(state_ss).standard_normal(n_steps)
    eps = np.random.default_rng(obs_ss).standard_normal(n_steps)

    beta = model.fast.beta(tuple(th), x)
    sigma = model.fast.sigma(tuple(th))
    gamma, alpha = th[0], th[1]

    states = np.empty(n_steps + 1)
    obs = np.empty(n_steps)
    states[0] = x
    clamps = 0
    for t in range(1, n_steps + 1):
        arg = x - gamma
        if arg < _CLAMP:
            arg = _CLAMP
            clamps += 1
        x = alpha * math.sqrt(arg) + beta * eta[t - 1]
        obs[t - 1] = x + sigma * eps[t - 1]
        states[t] = x

    return Trajectory(
        states=states[:, None],
        observations=obs[:, None],
        seed=_seed_record(root_ss),
        state_noise=eta[:, None] if store_noise else None,
        obs_noise=eps[:, None] if store_noise else None,
        diagnostics={"domain_clamps": clamps},
    )


def make_sqrt_drift(params: SqrtDriftParams) -> ModelSpec:
    beta = math.sqrt(params.beta_sq)
    sigma = math.sqrt(params.sigma_sq)
    beta_mat = np.array([[beta]])
    sigma_mat = np.array([[sigma]])
    x0 = params.x0_mean if params.x0_mean is not None else params.fixed_point()

    return ModelSpec(
        name="sqrt",
        state_dim=1,
        obs_dim=1,
        theta_labels=("gamma", "alpha"),
        b=lambda th, x: np.array([th[1] * _root(th, float(x[0]))]),
        h=lambda th, x, s=None: np.asarray(x, dtype=float),
        A=lambda th, x: np.array([[th[1] / (2.0 * _root(th, float(x[0])))]]),
        C=lambda th, x, s=None: np.array([[1.0]]),
        beta=lambda th, x: beta_mat,
        sigma=lambda th: sigma_mat,
        x0_mean=np.array([x0]),
        x0_cov=np.array([[0.0]]),
        linear=False,
        admissible=_admissible,
        theta_bounds=((None, None), (1e-6, None)),
        simulate_fn=_simulate,
        fast=ScalarModelFns(
            b=lambda th, x: th[1] * _root(th, x),
            h=lambda th, x: x,
            A=lambda th, x: th[1] / (2.0 * _root(th, x)),
            C=lambda th, x: 1.0,
            beta=lambda th, x: beta,
            sigma=lambda th: sigma,
        ),
    )


def build(theta0, options: dict) -> ModelSpec:
    gamma, alpha = (float(v) for v in theta0)
    kwargs = {
        "gamma": gamma,
        "alpha": alpha,
        "beta_sq": float(options.get("beta_sq", 0.1)),
        "sigma_sq": float(options.get("sigma_sq", 0.2)),
    }
    if "x0_mean" in options:
        kwargs["x0_mean"] = float(options["x0_mean"])
    return make_sqrt_drift(SqrtDriftParams(**kwargs))
