"""Linear scalar autoregression with a scaled observation.

    x_t = gamma x_{t-1} + beta eta_t
    y_t = alpha x_t     + sigma eps_t

The estimable parameters are theta = (gamma, alpha); the noise scales
are family constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..perturbation import ThetaDerivatives
from ..statespace import ModelSpec, ScalarModelFns

__all__ = ["Ar1Params", "make_ar1", "theta_derivatives"]


@dataclass(frozen=True)
class Ar1Params:
    gamma: float
    alpha: float
    beta_sq: float = 0.1
    sigma_sq: float = 0.2
    x0_mean: float = 0.0
    x0_std: float = 0.0

    def __post_init__(self):
        if abs(self.gamma) >= 1.0:
            raise ValueError(f"|gamma| must be < 1 for stationarity, got {self.gamma}")
        if self.beta_sq < 0.0 or self.sigma_sq < 0.0:
            raise ValueError("noise variances must be nonnegative")
        if self.x0_std < 0.0:
            raise ValueError("x0_std must be nonnegative")


def _admissible(theta: np.ndarray):
    if abs(theta[0]) >= 1.0:
        return f"|gamma| must be < 1, got {theta[0]:.6g}"
    return None


def make_ar1(params: Ar1Params) -> ModelSpec:
    beta = math.sqrt(params.beta_sq)
    sigma = math.sqrt(params.sigma_sq)
    beta_mat = np.array([[beta]])
    sigma_mat = np.array([[sigma]])

    return ModelSpec(
        name="ar1",
        state_dim=1,
        obs_dim=1,
        theta_labels=("gamma", "alpha"),
        b=lambda th, x: th[0] * x,
        h=lambda th, x, s=None: th[1] * x,
        A=lambda th, x: np.array([[th[0]]]),
        C=lambda th, x, s=None: np.array([[th[1]]]),
        beta=lambda th, x: beta_mat,
        sigma=lambda th: sigma_mat,
        x0_mean=np.array([params.x0_mean]),
        x0_cov=np.array([[params.x0_std**2]]),
        linear=True,
        admissible=_admissible,
        theta_bounds=((-0.999, 0.999), (None, None)),
        fast=ScalarModelFns(
            b=lambda th, x: th[0] * x,
            h=lambda th, x: th[1] * x,
            A=lambda th, x: th[0],
            C=lambda th, x: th[1],
            beta=lambda th, x: beta,
            sigma=lambda th: sigma,
        ),
    )


def theta_derivatives(direction) -> ThetaDerivatives:
    """Exact directional derivatives of the family's affine coefficients.

    The transition slope is gamma and the observation slope is alpha, so
    dA and dC are just the respective direction components; offsets and
    noise factors do not depend on theta at all.
    """
    d = np.asarray(direction, dtype=float).reshape(-1)
    if d.size != 2:
        raise ValueError("direction must have two entries (gamma, alpha)")
    return ThetaDerivatives(
        dA=np.array([[d[0]]]),
        dC=np.array([[d[1]]]),
        du=np.zeros(1),
        dd=np.zeros(1),
        dbeta=np.zeros((1, 1)),
        dsigma=np.zeros((1, 1)),
    )


def build(theta0, options: dict) -> ModelSpec:
    """Registry adapter: build from a theta vector plus family options."""
    gamma, alpha = (float(v) for v in theta0)
    return make_ar1(
        Ar1Params(
            gamma=gamma,
            alpha=alpha,
            beta_sq=float(options.get("beta_sq", 0.1)),
            sigma_sq=float(options.get("sigma_sq", 0.2)),
            x0_mean=float(options.get("x0_mean", 0.0)),
            x0_std=float(options.get("x0_std", 0.0)),
        )
    )
