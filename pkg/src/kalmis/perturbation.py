"""First-order propagation of parameter bias through the filter.

A filter run at theta = theta0 + epsilon * direction differs from the
well-specified run in a way that is, to first order in epsilon, an
explicit linear functional of the true states and the noise draws.  This
module builds those functionals and uses them twice:

* :func:`predict_residuals` reconstructs the biased run's filter error
  and residual series pathwise from a stored trajectory, which makes the
  first-order claim falsifiable against the actual filter output;
* the covariance engine (:func:`error_lag_cov`,
  :func:`interpolation_autocov`, ...) turns the same functionals into
  closed-form second moments, quantifying how bias makes the
  interpolation residual serially correlated.

Two covariance routes are implemented on purpose.  The closed-form route
expands the error recursion into sums over noise indices with explicit
cross terms; :func:`residual_lag_cov_direct` instead propagates the
joint second moment of the augmented vector (e_t, x_t) step by step and
never writes a cross-covariance down.  They must agree to rounding, and
the tests hold them to that.

Everything here addresses time-invariant affine-in-state models (the
gains may still vary over time); nonlinear families are served by the
pathwise filter itself, not by these expansions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .filters import ResidualSeries
from .statespace import LinearizedStep, ModelSpec, linearize

__all__ = [
    "BiasDirection",
    "CorrectionTerms",
    "CovarianceBlocks",
    "ThetaDerivatives",
    "corrective_terms",
    "covariance_blocks",
    "directional_derivatives",
    "error_lag_cov",
    "error_measnoise_cov",
    "error_state_cov",
    "interpolation_autocov",
    "predict_residuals",
    "residual_lag_cov_direct",
]


@dataclass(frozen=True)
class BiasDirection:
    """A parameter offset factored as epsilon * direction.

    Keeping the scale separate from the direction is what makes order
    checks meaningful: halving ``epsilon`` with ``direction`` fixed must
    shrink first-order-accurate predictions' deviations fourfold.
    """

    epsilon: float
    direction: np.ndarray

    def __post_init__(self):
        vec = np.array(self.direction, dtype=float).reshape(-1)
        vec.flags.writeable = False
        object.__setattr__(self, "direction", vec)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite")
        if not np.all(np.isfinite(vec)):
            raise ValueError("direction must be finite")
        if not np.any(vec):
            raise ValueError("direction must be nonzero")

    @property
    def nu(self) -> np.ndarray:
        return self.epsilon * self.direction

    @classmethod
    def from_offset(cls, nu) -> "BiasDirection":
        """Wrap a raw offset vector as epsilon=1 times that vector."""
        return cls(1.0, nu)


@dataclass(frozen=True)
class ThetaDerivatives:
    """Directional derivatives of the affine model coefficients.

    All are derivatives along one fixed direction in parameter space, at
    fixed linearization points: dA, dC of the state/observation
    Jacobians, du, dd of the affine offsets, dbeta, dsigma of the noise
    factors.
    """

    dA: np.ndarray
    dC: np.ndarray
    du: np.ndarray
    dd: np.ndarray
    dbeta: np.ndarray
    dsigma: np.ndarray


def directional_derivatives(
    model: ModelSpec,
    theta,
    direction,
    x_prev=None,
    x_pred=None,
    s=None,
    rel_step: float = 1e-6,
) -> ThetaDerivatives:
    """Central-difference directional derivatives of the model coefficients.

    The transition pieces are differentiated at ``x_prev``, the
    observation pieces at ``x_pred`` (both default to the family's
    initial mean, which is the natural choice for affine families whose
    coefficients do not depend on the state at all).  For exact
    derivatives of a specific family, construct :class:`ThetaDerivatives`
    directly instead.
    """
    th = model.theta_array(theta)
    delta = np.asarray(direction, dtype=float).reshape(-1)
    if delta.size != th.size:
        raise ValueError(
            f"direction has {delta.size} entries, expected {th.size}"
        )
    scale = float(np.max(np.abs(delta)))
    if scale == 0.0:
        raise ValueError("direction must be nonzero")
    x_prev = model.x0_mean if x_prev is None else np.asarray(x_prev, dtype=float)
    x_pred = x_prev if x_pred is None else np.asarray(x_pred, dtype=float)

    step = rel_step * max(1.0, float(np.max(np.abs(th)))) / scale
    hi = linearize(model, th + step * delta, x_prev, x_pred, s)
    lo = linearize(model, th - step * delta, x_prev, x_pred, s)
    inv = 1.0 / (2.0 * step)
    beta_hi = np.atleast_2d(model.beta(th + step * delta, x_prev))
    beta_lo = np.atleast_2d(model.beta(th - step * delta, x_prev))
    sig_hi = np.atleast_2d(model.sigma(th + step * delta))
    sig_lo = np.atleast_2d(model.sigma(th - step * delta))
    return ThetaDerivatives(
        dA=(hi.A - lo.A) * inv,
        dC=(hi.C - lo.C) * inv,
        du=(hi.u - lo.u) * inv,
        dd=(hi.d - lo.d) * inv,
        dbeta=(beta_hi - beta_lo) * inv,
        dsigma=(sig_hi - sig_lo) * inv,
    )


# ======================================================================
# per-step correction terms
# ======================================================================


@dataclass(frozen=True)
class CorrectionTerms:
    """First-order deviation coefficients induced by the bias at one step.

    Each of the three affected quantities -- the filter error, the
    interpolation residual and the innovation residual -- picks up a
    constant offset, a term linear in the relevant true state, and
    adjustments to how the two noise draws feed through:

        error  deviation ~ err_offset  + err_state  @ x_{t-1}
                           + err_shock_state @ eta_t + err_shock_obs @ eps_t

    and analogously for ``obs_*`` (interpolation, against x_t) and
    ``innov_*`` (innovation, against x_{t-1}).  The shock coefficients
    are deviations from the unbiased feedthroughs, not totals.
    """

    err_offset: np.ndarray
    err_state: np.ndarray
    err_shock_state: np.ndarray
    err_shock_obs: np.ndarray
    obs_offset: np.ndarray
    obs_state: np.ndarray
    obs_shock_state: np.ndarray
    obs_shock_obs: np.ndarray
    innov_offset: np.ndarray
    innov_state: np.ndarray
    innov_shock_state: np.ndarray
    innov_shock_obs: np.ndarray


def corrective_terms(
    derivs: ThetaDerivatives,
    step: LinearizedStep,
    gain,
    beta,
    sigma,
    epsilon: float,
) -> CorrectionTerms:
    """Assemble the first-order correction terms for one filter step.

    ``step``, ``beta`` and ``sigma`` are the affine coefficients at the
    biased parameter; ``gain`` is the filter gain actually used at this
    step.  All twelve coefficient blocks scale linearly in ``epsilon``.
    """
    A, C, u = step.A, step.C, step.u
    K = np.atleast_2d(gain)
    n = A.shape[0]
    m = C.shape[0]
    if K.shape != (n, m):
        raise ValueError(f"gain has shape {K.shape}, expected {(n, m)}")
    IKC = np.eye(n) - K @ C
    eps = float(epsilon)

    err_offset = -eps * (IKC @ derivs.du - K @ derivs.dd - K @ (derivs.dC @ u))
    err_state = -eps * (IKC @ derivs.dA - K @ derivs.dC @ A)
    err_shock_state = -eps * (IKC @ derivs.dbeta - K @ derivs.dC @ beta)
    err_shock_obs = eps * (K @ derivs.dsigma)

    obs_offset = -eps * derivs.dd
    obs_state = -eps * derivs.dC
    obs_shock_state = np.zeros((m, n))
    obs_shock_obs = -eps * derivs.dsigma

    innov_offset = -eps * (derivs.dd + C @ derivs.du + derivs.dC @ u)
    innov_state = -eps * (C @ derivs.dA + derivs.dC @ A)
    innov_shock_state = -eps * (derivs.dC @ beta + C @ derivs.dbeta)
    innov_shock_obs = -eps * derivs.dsigma

    return CorrectionTerms(
        err_offset=err_offset,
        err_state=err_state,
        err_shock_state=err_shock_state,
        err_shock_obs=err_shock_obs,
        obs_offset=obs_offset,
        obs_state=obs_state,
        obs_shock_state=obs_shock_state,
        obs_shock_obs=obs_shock_obs,
        innov_offset=innov_offset,
        innov_state=innov_state,
        innov_shock_state=innov_shock_state,
        innov_shock_obs=innov_shock_obs,
    )


# ======================================================================
# composite per-step blocks for the error recursion
# ======================================================================


@dataclass
class CovarianceBlocks:
    """Everything needed to evaluate second moments of the biased run.

    The filter error follows the recursion (exact to first order)

        e_t = closed_loop[t] @ e_{t-1} + err_offset[t]
              + err_state[t] @ x_{t-1}
              - gain_state_noise[t] @ eta_t - gain_obs_noise[t] @ eps_t

    with blocks indexed 1..n_steps (index 0 unused).  Truth-side
    quantities (a0, beta0, x_var, a0_pow, x0_cov) describe the actual
    state process; theta-side quantities carry the biased filter's
    coefficients and the observation-equation correction coefficients.
    """

    n_steps: int
    state_dim: int
    obs_dim: int
    closed_loop: np.ndarray        # (N+1, n, n)
    gain_obs_noise: np.ndarray     # (N+1, n, m)
    gain_state_noise: np.ndarray   # (N+1, n, n)
    err_state: np.ndarray          # (N+1, n, n)
    err_offset: np.ndarray         # (N+1, n)
    corrections: tuple             # per-step CorrectionTerms, index 0 is None
    a0: np.ndarray                 # truth transition matrix
    beta0: np.ndarray              # truth state-noise factor
    x0_cov: np.ndarray
    x_var: np.ndarray              # (N+1, n, n) true state variances
    a0_pow: np.ndarray             # (N+1, n, n) powers of a0
    step_theta: LinearizedStep     # affine coefficients at the biased theta
    beta_theta: np.ndarray
    sigma_theta: np.ndarray
    obs_offset: np.ndarray         # (m,) constant part of the residual shift
    obs_state: np.ndarray          # (m, n) state-linear part of the shift
    sigma_bar: np.ndarray          # (m, m) effective obs-noise feedthrough

    @property
    def c_theta(self) -> np.ndarray:
        return self.step_theta.C


def covariance_blocks(
    model: ModelSpec,
    theta0,
    bias: BiasDirection,
    gains,
    derivs: Optional[ThetaDerivatives] = None,
    x0_cov=None,
) -> CovarianceBlocks:
    """Build the per-step blocks from a biased run's gain sequence.

    ``gains`` is the (N+1, n, m) gain array recorded by the filter at
    theta0 + bias.nu.  ``x0_cov`` overrides the family's initial-state
    covariance (pass zeros when the trajectory was started
    deterministically -- the family default already is zero in that
    case).
    """
    if not model.linear:
        raise ValueError(
            "closed-form residual covariances require an affine-in-state family"
        )
    if model.exog is not None:
        raise ValueError(
            "families with per-step exogenous context are not supported here"
        )
    th0 = model.theta_array(theta0)
    th = model.check_admissible(th0 + bias.nu)

    gains = np.asarray(gains, dtype=float)
    n, m = model.state_dim, model.obs_dim
    if gains.ndim != 3 or gains.shape[1:] != (n, m):
        raise ValueError(
            f"gains must have shape (N+1, {n}, {m}), got {gains.shape}"
        )
    n_steps = gains.shape[0] - 1
    if n_steps < 1:
        raise ValueError("need at least one filter step")

    x0 = model.x0_mean
    step = linearize(model, th, x0, x0, None)
    step0 = linearize(model, th0, x0, x0, None)
    a0 = step0.A
    beta0 = np.atleast_2d(model.beta(th0, x0))
    beta_theta = np.atleast_2d(model.beta(th, x0))
    sigma_theta = np.atleast_2d(model.sigma(th))
    if derivs is None:
        derivs = directional_derivatives(model, th, bias.direction)

    closed_loop = np.zeros((n_steps + 1, n, n))
    gain_obs = np.zeros((n_steps + 1, n, m))
    gain_state = np.zeros((n_steps + 1, n, n))
    err_state = np.zeros((n_steps + 1, n, n))
    err_offset = np.zeros((n_steps + 1, n))
    corrections: list = [None]
    eye_n = np.eye(n)
    for t in range(1, n_steps + 1):
        K = gains[t]
        ct = corrective_terms(derivs, step, K, beta_theta, sigma_theta,
                              bias.epsilon)
        corrections.append(ct)
        ikc = eye_n - K @ step.C
        closed_loop[t] = ikc @ step.A
        gain_obs[t] = K @ sigma_theta - ct.err_shock_obs
        gain_state[t] = -(ikc @ beta_theta + ct.err_shock_state)
        err_state[t] = ct.err_state
        err_offset[t] = ct.err_offset

    if x0_cov is None:
        x0_cov = model.x0_cov
    x0_cov = np.asarray(x0_cov, dtype=float).reshape(n, n)

    x_var = np.empty((n_steps + 1, n, n))
    a0_pow = np.empty((n_steps + 1, n, n))
    x_var[0] = x0_cov
    a0_pow[0] = eye_n
    q0 = beta0 @ beta0.T
    for t in range(1, n_steps + 1):
        x_var[t] = a0 @ x_var[t - 1] @ a0.T + q0
        a0_pow[t] = a0 @ a0_pow[t - 1]

    ct1 = corrections[1]
    return CovarianceBlocks(
        n_steps=n_steps,
        state_dim=n,
        obs_dim=m,
        closed_loop=closed_loop,
        gain_obs_noise=gain_obs,
        gain_state_noise=gain_state,
        err_state=err_state,
        err_offset=err_offset,
        corrections=tuple(corrections),
        a0=a0,
        beta0=beta0,
        x0_cov=x0_cov,
        x_var=x_var,
        a0_pow=a0_pow,
        step_theta=step,
        beta_theta=beta_theta,
        sigma_theta=sigma_theta,
        obs_offset=ct1.obs_offset,
        obs_state=ct1.obs_state,
        sigma_bar=sigma_theta + ct1.obs_shock_obs,
    )


# ======================================================================
# pathwise prediction
# ======================================================================


def predict_residuals(
    model: ModelSpec,
    theta0,
    bias: BiasDirection,
    traj,
    trace,
    derivs: Optional[ThetaDerivatives] = None,
) -> ResidualSeries:
    """Reconstruct a biased run's residuals from truth plus noise draws.

    Given a trajectory simulated at ``theta0`` (with its noise draws
    stored) and the trace of a filter run at ``theta0 + bias.nu``, this
    composes the first-order error recursion and the residual shift
    formulas into predicted innovation, interpolation and error series.
    Comparing them with ``trace.residuals`` measures exactly the
    second-order remainder.
    """
    if traj.state_noise is None or traj.obs_noise is None:
        raise ValueError("trajectory must carry its noise draws")
    blocks = covariance_blocks(model, theta0, bias, trace.gains, derivs=derivs)
    n_steps = blocks.n_steps
    if traj.n_steps != n_steps:
        raise ValueError(
            f"trajectory has {traj.n_steps} steps, trace has {n_steps}"
        )

    step = blocks.step_theta
    c_th, a_th = step.C, step.A
    beta_th, sigma_th = blocks.beta_theta, blocks.sigma_theta

    innov = np.empty((n_steps, blocks.obs_dim))
    interp = np.empty((n_steps, blocks.obs_dim))
    error = np.empty((n_steps, blocks.state_dim))

    e = traj.states[0] - model.x0_mean
    for t in range(1, n_steps + 1):
        ct = blocks.corrections[t]
        x_prev = traj.states[t - 1]
        x_t = traj.states[t]
        eta = traj.state_noise[t - 1]
        eps = traj.obs_noise[t - 1]

        innov[t - 1] = (
            ct.innov_offset
            + c_th @ (a_th @ e)
            + ct.innov_state @ x_prev
            + (c_th @ beta_th + ct.innov_shock_state) @ eta
            + (sigma_th + ct.innov_shock_obs) @ eps
        )
        e = (
            blocks.closed_loop[t] @ e
            + ct.err_offset
            + ct.err_state @ x_prev
            - blocks.gain_state_noise[t] @ eta
            - blocks.gain_obs_noise[t] @ eps
        )
        interp[t - 1] = (
            ct.obs_offset
            + c_th @ e
            + ct.obs_state @ x_t
            + (sigma_th + ct.obs_shock_obs) @ eps
        )
        error[t - 1] = e

    return ResidualSeries(innov=innov, interp=interp, error=error)


# ======================================================================
# closed-form second moments
# ======================================================================


def _suffix_products(closed_loop: np.ndarray, t: int) -> np.ndarray:
    """S[k] = closed_loop[t] @ ... @ closed_loop[k], with S[t+1] = I."""
    n = closed_loop.shape[1]
    out = np.empty((t + 2, n, n))
    out[t + 1] = np.eye(n)
    for k in range(t, 0, -1):
        out[k] = out[k + 1] @ closed_loop[k]
    return out


def _x_cross(blocks: CovarianceBlocks, a: int, b: int) -> np.ndarray:
    """Cov(x_a, x_b) of the centered true state."""
    if a <= b:
        return blocks.x_var[a] @ blocks.a0_pow[b - a].T
    return blocks.a0_pow[a - b] @ blocks.x_var[b]


def _check_times(blocks: CovarianceBlocks, t: int, low: int) -> None:
    if not low <= t <= blocks.n_steps:
        raise ValueError(
            f"time {t} outside the filtered range [{low}, {blocks.n_steps}]"
        )


def error_lag_cov(blocks: CovarianceBlocks, t: int, h: int = 0) -> np.ndarray:
    """Cov(e_t, e_{t-h}) of the first-order filter error, h >= 0."""
    if h < 0:
        raise ValueError("lag must be nonnegative")
    _check_times(blocks, t, 1)
    s = t - h
    if s < 0:
        raise ValueError(f"lag {h} exceeds time {t}")
    St = _suffix_products(blocks.closed_loop, t)
    Ss = _suffix_products(blocks.closed_loop, s)
    B = blocks.gain_obs_noise
    Cn = blocks.gain_state_noise
    F = blocks.err_state
    beta0 = blocks.beta0
    apow = blocks.a0_pow
    x0c = blocks.x0_cov
    has_x0 = bool(np.any(x0c))

    total = St[1] @ x0c @ Ss[1].T if has_x0 else np.zeros_like(x0c)

    # shared noise indices feed both endpoints
    for l in range(1, s + 1):
        shared = B[l] @ B[l].T + Cn[l] @ Cn[l].T
        total += St[l + 1] @ shared @ Ss[l + 1].T

    # state noise entering the truth path before index k feeds the
    # state-linear correction at k (and symmetrically)
    for k in range(1, s + 1):
        tail = F[k].T @ Ss[k + 1].T
        for l in range(1, min(t, k - 1) + 1):
            total -= St[l + 1] @ Cn[l] @ (apow[k - 1 - l] @ beta0).T @ tail
    for l in range(1, t + 1):
        head = St[l + 1] @ F[l]
        for k in range(1, min(s, l - 1) + 1):
            total -= head @ (apow[l - 1 - k] @ beta0) @ Cn[k].T @ Ss[k + 1].T

    # state-linear corrections at both endpoints against the state law
    for l in range(1, t + 1):
        head = St[l + 1] @ F[l]
        for k in range(1, s + 1):
            total += head @ _x_cross(blocks, l - 1, k - 1) @ F[k].T @ Ss[k + 1].T

    # a random start also correlates with the state-linear corrections
    if has_x0:
        for k in range(1, s + 1):
            total += St[1] @ x0c @ apow[k - 1].T @ F[k].T @ Ss[k + 1].T
        for l in range(1, t + 1):
            total += St[l + 1] @ F[l] @ apow[l - 1] @ x0c @ Ss[1].T
    return total


def error_state_cov(blocks: CovarianceBlocks, t: int, j: int) -> np.ndarray:
    """Cov(e_t, x_j) between the filter error and the centered true state."""
    _check_times(blocks, t, 1)
    if not 0 <= j <= blocks.n_steps:
        raise ValueError(f"state time {j} outside [0, {blocks.n_steps}]")
    St = _suffix_products(blocks.closed_loop, t)
    out = np.zeros((blocks.state_dim, blocks.state_dim))
    if np.any(blocks.x0_cov):
        out += St[1] @ blocks.x0_cov @ blocks.a0_pow[j].T
    for l in range(1, min(t, j) + 1):
        out -= (
            St[l + 1]
            @ blocks.gain_state_noise[l]
            @ (blocks.a0_pow[j - l] @ blocks.beta0).T
        )
    for l in range(1, t + 1):
        out += St[l + 1] @ blocks.err_state[l] @ _x_cross(blocks, l - 1, j)
    return out


def error_measnoise_cov(blocks: CovarianceBlocks, t: int, j: int) -> np.ndarray:
    """Cov(e_t, eps_j) against the raw observation-noise draw at j."""
    _check_times(blocks, t, 1)
    if j < 1 or j > t:
        return np.zeros((blocks.state_dim, blocks.obs_dim))
    St = _suffix_products(blocks.closed_loop, t)
    return -St[j + 1] @ blocks.gain_obs_noise[j]


def interpolation_autocov(blocks: CovarianceBlocks, t: int, h: int) -> np.ndarray:
    """Cov(zeta_t, zeta_{t-h}) of the interpolation residual, h >= 0.

    Assembled from the error/state/noise covariances through the
    first-order residual representation
    zeta_t = const + C e_t + obs_state x_t + sigma_bar eps_t.
    """
    if h < 0:
        raise ValueError("lag must be nonnegative")
    s = t - h
    _check_times(blocks, t, 1)
    _check_times(blocks, s, 1)
    C = blocks.c_theta
    Fo = blocks.obs_state
    sb = blocks.sigma_bar

    cee = error_lag_cov(blocks, t, h)
    cex = error_state_cov(blocks, t, s)
    cxe = error_state_cov(blocks, s, t).T  # Cov(x_t, e_s)
    ceps = error_measnoise_cov(blocks, t, s)
    cxx = _x_cross(blocks, t, s)

    out = (
        C @ cee @ C.T
        + C @ cex @ Fo.T
        + C @ ceps @ sb.T
        + Fo @ cxe @ C.T
        + Fo @ cxx @ Fo.T
    )
    if h == 0:
        out = out + sb @ ceps.T @ C.T + sb @ sb.T
    return out


def residual_lag_cov_direct(blocks: CovarianceBlocks, t: int, h: int) -> np.ndarray:
    """Cov(zeta_t, zeta_{t-h}) by propagating augmented moments directly.

    Tracks the joint second moment of Z_t = (e_t, x_t) through the
    one-step recursion Z_t = M_t Z_{t-1} + L_t w_t, so no explicit sum
    over noise indices and no standalone cross-covariance formula is
    involved.  Serves as an independent check on
    :func:`interpolation_autocov`.
    """
    if h < 0:
        raise ValueError("lag must be nonnegative")
    s = t - h
    _check_times(blocks, t, 1)
    _check_times(blocks, s, 1)
    n, m = blocks.state_dim, blocks.obs_dim

    def m_block(l: int) -> np.ndarray:
        out = np.zeros((2 * n, 2 * n))
        out[:n, :n] = blocks.closed_loop[l]
        out[:n, n:] = blocks.err_state[l]
        out[n:, n:] = blocks.a0
        return out

    def l_block(l: int) -> np.ndarray:
        out = np.zeros((2 * n, n + m))
        out[:n, :n] = -blocks.gain_state_noise[l]
        out[:n, n:] = -blocks.gain_obs_noise[l]
        out[n:, :n] = blocks.beta0
        return out

    sigma_z = np.tile(blocks.x0_cov, (2, 2))
    sigma_s = None
    for l in range(1, t + 1):
        M = m_block(l)
        L = l_block(l)
        sigma_z = M @ sigma_z @ M.T + L @ L.T
        if l == s:
            sigma_s = sigma_z.copy()

    # Cov(Z_s, eps_s) is the eps column of L_s; it and Sigma_s are then
    # pushed forward through the transition blocks up to t.
    col = np.zeros((2 * n, m))
    col[:n] = -blocks.gain_obs_noise[s]
    if h == 0:
        cov_z = sigma_z
    else:
        prod = np.eye(2 * n)
        for l in range(s + 1, t + 1):
            M = m_block(l)
            prod = M @ prod
            col = M @ col
        cov_z = prod @ sigma_s

    sel = np.hstack([blocks.c_theta, blocks.obs_state])
    sb = blocks.sigma_bar
    out = sel @ cov_z @ sel.T + sel @ col @ sb.T
    if h == 0:
        out = out + sb @ col.T @ sel.T + sb @ sb.T
    return out
