"""Stochastic-volatility family: latent CIR variance observed through
option prices.

State: the daily variance v_t, simulated with the exact CIR transition
(noncentral chi-square).  Observations: a panel of call prices on a
moneyness/maturity grid, struck as fractions of the current spot, plus
additive Gaussian pricing noise.  The spot path is generated once per
trajectory (Euler on log S with shocks correlated to the variance
innovations at rate rho) and rides along as exogenous context: filters
condition on it rather than estimating it.

The filter model uses the Gaussian moment-matched form of the CIR step,

    v_t ~= Psi(v_{t-1}) + sqrt(Phi(v_{t-1})) eta_t,

with Psi/Phi the exact conditional mean and variance.

Pricing uses the two-probability characteristic-function representation

    Call = S P1 - K exp(-r tau) P2,
    P_j  = 1/2 + (1/pi) Int_0^inf Re[exp(-iu ln K) f_j(u) / (iu)] du,

evaluated with the branch-stable parameterization of the log-term (the
ratio form that keeps the complex logarithm away from its cut for long
maturities) and Gauss-Legendre quadrature whose truncation point and
node count are chosen adaptively per parameter point, then cached so a
filter pass reuses one rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..statespace import (
    InadmissibleParameterError,
    ModelSpec,
    Trajectory,
    _seed_record,
)

__all__ = [
    "HestonParams",
    "ObservationGrid",
    "cir_cond_mean",
    "cir_cond_var",
    "cir_transition_sample",
    "heston_call_price",
    "heston_put_price",
    "make_heston",
]

_V_FLOOR = 1e-8
_DEFAULT_DELTA = 1.0 / 252.0


@dataclass(frozen=True)
class HestonParams:
    """Parameters of the variance dynamics and pricing measure.

    theta = (kappa, long_run_var, vol_of_var, rho); the rate, the initial
    variance and the initial spot are family constants.
    """

    kappa: float = 4.0
    long_run_var: float = 0.03
    vol_of_var: float = 0.4
    rho: float = -0.5
    rate: float = 0.05
    v0: float = 0.03
    s0: float = 100.0

    def __post_init__(self):
        if self.kappa <= 0.0 or self.long_run_var <= 0.0 or self.vol_of_var <= 0.0:
            raise ValueError("kappa, long_run_var and vol_of_var must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.v0 < 0.0:
            raise ValueError("v0 must be nonnegative")
        if self.s0 <= 0.0:
            raise ValueError("s0 must be positive")

    def feller_margin(self) -> float:
        return 2.0 * self.kappa * self.long_run_var - self.vol_of_var**2

    def theta(self) -> np.ndarray:
        return np.array([self.kappa, self.long_run_var, self.vol_of_var, self.rho])


@dataclass(frozen=True)
class ObservationGrid:
    """Call panel: strikes as fractions of spot, maturities in years.

    Contracts are ordered maturity-major: all strikes of the first
    maturity, then the next maturity, and so on.
    """

    strike_fracs: tuple = (0.90, 1.00, 1.10)
    maturities: tuple = (0.1, 0.5, 1.0)

    def __post_init__(self):
        if not self.strike_fracs or not self.maturities:
            raise ValueError("grid needs at least one strike and one maturity")
        if any(f <= 0 for f in self.strike_fracs) or any(
            t <= 0 for t in self.maturities
        ):
            raise ValueError("strike fractions and maturities must be positive")

    @property
    def size(self) -> int:
        return len(self.strike_fracs) * len(self.maturities)

    def contracts(self) -> tuple:
        return tuple(
            (float(tau), float(frac))
            for tau in self.maturities
            for frac in self.strike_fracs
        )


# ======================================================================
# CIR transition
# ======================================================================


def cir_cond_mean(v, kappa: float, long_run_var: float, dt: float):
    """Conditional mean of the CIR variance one step ahead."""
    decay = np.exp(-kappa * dt)
    return long_run_var * (1.0 - decay) + decay * v


def cir_cond_var(v, kappa: float, long_run_var: float, vol_of_var: float, dt: float):
    """Conditional variance of the CIR variance one step ahead."""
    decay = np.exp(-kappa * dt)
    b2 = vol_of_var**2
    return (
        long_run_var * b2 / (2.0 * kappa) * (1.0 - decay) ** 2
        + b2 / kappa * decay * (1.0 - decay) * v
    )


def cir_transition_sample(
    v, kappa: float, long_run_var: float, vol_of_var: float, dt: float,
    rng: np.random.Generator, size=None,
):
    """Exact one-step CIR draw via the scaled noncentral chi-square."""
    decay = math.exp(-kappa * dt)
    c = 2.0 * kappa / (vol_of_var**2 * (1.0 - decay))
    df = 4.0 * kappa * long_run_var / vol_of_var**2
    nonc = 2.0 * c * np.asarray(v) * decay
    return rng.noncentral_chisquare(df, nonc, size=size) / (2.0 * c)


# ======================================================================
# characteristic-function pricing
# ======================================================================


def _cf_coeffs(u: np.ndarray, tau: float, kappa: float, long_run_var: float,
               vol_of_var: float, rho: float, rate: float, j: int):
    """Log-characteristic-function coefficients C(u), D(u) for P_j."""
    iu = 1j * u
    if j == 1:
        b = kappa - rho * vol_of_var
        uj = 0.5
    else:
        b = kappa
        uj = -0.5
    a = kappa * long_run_var
    b2 = vol_of_var**2

    xi = b - rho * vol_of_var * iu
    d = np.sqrt(xi * xi - b2 * (2.0 * uj * iu - u * u))
    g = (xi - d) / (xi + d)
    edt = np.exp(-d * tau)
    log_term = np.log((1.0 - g * edt) / (1.0 - g))
    Cc = rate * iu * tau + (a / b2) * ((xi - d) * tau - 2.0 * log_term)
    Dc = (xi - d) / b2 * (1.0 - edt) / (1.0 - g * edt)
    return Cc, Dc


class _PricingKernel:
    """Precomputed quadrature data for one parameter point and contract set.

    ``contracts`` is a tuple of (tau, log_moneyness) pairs where
    log_moneyness = ln(K/S); unit prices are call prices for S = 1.
    """

    def __init__(self, params4, rate, contracts, nodes, weights):
        self.params4 = params4
        self.rate = rate
        self.contracts = contracts
        self.nodes = nodes
        n_c, n_u = len(contracts), nodes.size
        self._c1 = np.empty((n_c, n_u), dtype=complex)
        self._d1 = np.empty((n_c, n_u), dtype=complex)
        self._c2 = np.empty((n_c, n_u), dtype=complex)
        self._d2 = np.empty((n_c, n_u), dtype=complex)
        self._base = np.empty((n_c, n_u), dtype=complex)
        self._discount = np.empty(n_c)
        coeff_cache: dict = {}
        for i, (tau, logm) in enumerate(contracts):
            if tau not in coeff_cache:
                coeff_cache[tau] = (
                    _cf_coeffs(nodes, tau, *params4, rate, 1),
                    _cf_coeffs(nodes, tau, *params4, rate, 2),
                )
            (c1, d1), (c2, d2) = coeff_cache[tau]
            self._c1[i], self._d1[i] = c1, d1
            self._c2[i], self._d2[i] = c2, d2
            # exp(-iu ln(K/S)) / (iu), folded with the quadrature weights
            self._base[i] = weights * np.exp(-1j * nodes * logm) / (1j * nodes)
            self._discount[i] = math.exp(logm - rate * tau)  # (K/S) e^{-r tau}

    def probabilities(self, v):
        """P1, P2 arrays of shape v.shape + (n_contracts,)."""
        v = np.asarray(v, dtype=float)
        vv = v.reshape(v.shape + (1, 1))
        p1 = 0.5 + np.sum(
            (np.exp(self._c1 + self._d1 * vv) * self._base).real, axis=-1
        ) / math.pi
        p2 = 0.5 + np.sum(
            (np.exp(self._c2 + self._d2 * vv) * self._base).real, axis=-1
        ) / math.pi
        return p1, p2

    def unit_call(self, v):
        """Call prices for unit spot, shape v.shape + (n_contracts,)."""
        p1, p2 = self.probabilities(v)
        return p1 - self._discount * p2

    def unit_put(self, v):
        p1, p2 = self.probabilities(v)
        return self._discount * (1.0 - p2) - (1.0 - p1)


def _gl_rule(n_nodes: int, upper: float):
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    return 0.5 * upper * (x + 1.0), 0.5 * upper * w


def _pick_truncation(params4, rate, taus, v_max: float) -> float:
    upper = 50.0
    while upper < 5000.0:
        worst = 0.0
        for tau in taus:
            for j in (1, 2):
                cc, dc = _cf_coeffs(np.array([upper]), tau, *params4, rate, j)
                worst = max(
                    worst,
                    float(np.exp(cc.real[0])) / upper,
                    float(np.exp(cc.real[0] + dc.real[0] * v_max)) / upper,
                )
        if worst < 1e-12:
            return upper
        upper *= 1.4
    return upper


def _build_kernel(params4, rate, contracts) -> _PricingKernel:
    lvar = params4[1]
    probes = np.array([max(1e-6, 0.25 * lvar), lvar, 4.0 * lvar])
    taus = sorted({tau for tau, _ in contracts})
    upper = _pick_truncation(params4, rate, taus, float(probes[-1]))

    n_nodes = 128
    kernel = _PricingKernel(params4, rate, contracts, *_gl_rule(n_nodes, upper))
    ref = kernel.unit_call(probes)
    while n_nodes < 4096:
        finer = _PricingKernel(
            params4, rate, contracts, *_gl_rule(2 * n_nodes, upper)
        )
        vals = finer.unit_call(probes)
        kernel, n_nodes = finer, 2 * n_nodes
        if float(np.max(np.abs(vals - ref))) < 1e-9:
            break
        ref = vals
    return kernel


_KERNEL_CACHE: dict = {}
_KERNEL_CACHE_MAX = 16


def _kernel_for(params4, rate, contracts) -> _PricingKernel:
    key = (params4, rate, contracts)
    kernel = _KERNEL_CACHE.get(key)
    if kernel is None:
        kernel = _build_kernel(params4, rate, contracts)
        if len(_KERNEL_CACHE) >= _KERNEL_CACHE_MAX:
            _KERNEL_CACHE.pop(next(iter(_KERNEL_CACHE)))
        _KERNEL_CACHE[key] = kernel
    return kernel


def heston_call_price(s: float, v: float, tau: float, strike: float,
                      params: HestonParams) -> float:
    """Semi-closed-form European call price at spot ``s``, variance ``v``."""
    if s <= 0.0 or strike <= 0.0 or tau <= 0.0:
        raise ValueError("spot, strike and maturity must be positive")
    params4 = (params.kappa, params.long_run_var, params.vol_of_var, params.rho)
    contracts = ((float(tau), math.log(strike / s)),)
    kernel = _kernel_for(params4, params.rate, contracts)
    return float(s * kernel.unit_call(np.array([max(v, _V_FLOOR)]))[0, 0])


def heston_put_price(s: float, v: float, tau: float, strike: float,
                     params: HestonParams) -> float:
    """European put from the same probabilities as the call."""
    if s <= 0.0 or strike <= 0.0 or tau <= 0.0:
        raise ValueError("spot, strike and maturity must be positive")
    params4 = (params.kappa, params.long_run_var, params.vol_of_var, params.rho)
    contracts = ((float(tau), math.log(strike / s)),)
    kernel = _kernel_for(params4, params.rate, contracts)
    return float(s * kernel.unit_put(np.array([max(v, _V_FLOOR)]))[0, 0])


# ======================================================================
# model factory
# ======================================================================


def _admissible(theta: np.ndarray):
    # Filter evaluation only needs the one-step moment formulas and the
    # pricing transform to be well defined, and both hold for any positive
    # (kappa, long_run_var, vol_of_var) regardless of the Feller margin --
    # a sub-Feller variance process merely touches zero, which the state
    # floor already absorbs.  The data-generating parameter is held to the
    # stricter standard at construction time in make_heston.
    kappa, lvar, vov, rho = theta
    if kappa <= 0.0 or lvar <= 0.0 or vov <= 0.0:
        return "kappa, long_run_var and vol_of_var must be positive"
    if not -1.0 < rho < 1.0:
        return f"rho must lie in (-1, 1), got {rho:.6g}"
    return None


def make_heston(
    params: HestonParams,
    grid: ObservationGrid | None = None,
    obs_noise_sd: float | None = None,
    delta: float = _DEFAULT_DELTA,
) -> ModelSpec:
    """Build the variance-filtering model around a call-price panel.

    Args:
        obs_noise_sd: standard deviation of the additive pricing noise per
            contract; defaults to 1% of the initial spot.
        delta: observation spacing in years (default one trading day).

    The returned spec has no exogenous path bound yet; simulation
    attaches the generated spot path to the trajectory, and
    ``model.with_exog(traj.exog)`` binds it for filtering.
    """
    if params.feller_margin() <= 0.0:
        raise InadmissibleParameterError(
            "Feller condition violated: need 2*kappa*long_run_var > vol_of_var^2"
        )
    grid = grid or ObservationGrid()
    sd = obs_noise_sd if obs_noise_sd is not None else 0.01 * params.s0
    if sd <= 0.0:
        raise ValueError("obs_noise_sd must be positive")
    m = grid.size
    rate = params.rate
    # Unit-spot contracts: strikes are fixed fractions of the current spot,
    # so log-moneyness is constant over time and prices scale with S_t.
    contracts = tuple(
        (tau, math.log(frac)) for tau, frac in grid.contracts()
    )

    def kernel(th):
        return _kernel_for((th[0], th[1], th[2], th[3]), rate, contracts)

    def b(th, x):
        v = max(float(x[0]), _V_FLOOR)
        return np.array([cir_cond_mean(v, th[0], th[1], delta)])

    def A(th, x):
        return np.array([[math.exp(-th[0] * delta)]])

    def beta(th, x):
        v = max(float(x[0]), _V_FLOOR)
        return np.array([[math.sqrt(cir_cond_var(v, th[0], th[1], th[2], delta))]])

    def h(th, x, s):
        if s is None:
            raise ValueError("observation function needs the spot as context; "
                             "bind the trajectory's exog path to the model")
        v = max(float(x[0]), _V_FLOOR)
        return float(s) * kernel(th).unit_call(np.array([v]))[0]

    def C(th, x, s):
        if s is None:
            raise ValueError("observation Jacobian needs the spot as context; "
                             "bind the trajectory's exog path to the model")
        v = max(float(x[0]), _V_FLOOR)
        dv = 1e-5 + 1e-3 * v
        lo = max(v - dv, _V_FLOOR)
        hi = v + dv
        vals = kernel(th).unit_call(np.array([hi, lo]))
        return (float(s) * (vals[0] - vals[1]) / (hi - lo))[:, None]

    def simulate_fn(model, th, n_steps, root_ss, gaussian_x0, store_noise):
        return _simulate_heston(
            model, th, n_steps, root_ss, store_noise,
            rate=rate, v0=params.v0, s0=params.s0, delta=delta,
            kernel=kernel, sd=sd, m=m,
        )

    return ModelSpec(
        name="heston",
        state_dim=1,
        obs_dim=m,
        theta_labels=("kappa", "long_run_var", "vol_of_var", "rho"),
        b=b,
        h=h,
        A=A,
        C=C,
        beta=beta,
        sigma=lambda th: sd * np.eye(m),
        x0_mean=np.array([params.v0]),
        x0_cov=np.array([[0.0]]),
        linear=False,
        admissible=_admissible,
        theta_bounds=((1e-4, None), (1e-5, None), (1e-3, None), (-0.999, 0.999)),
        simulate_fn=simulate_fn,
    )


def _simulate_heston(model, th, n_steps, root_ss, store_noise, *,
                     rate, v0, s0, delta, kernel, sd, m):
    kappa, lvar, vov, rho = th
    var_ss, perp_ss, obs_ss = root_ss.spawn(3)
    var_rng = np.random.default_rng(var_ss)
    z_perp = np.random.default_rng(perp_ss).standard_normal(n_steps)
    eps = np.random.default_rng(obs_ss).standard_normal((n_steps, m))

    v_path = np.empty(n_steps + 1)
    s_path = np.empty(n_steps + 1)
    v_path[0] = v0
    s_path[0] = s0
    log_s = math.log(s0)
    rho_perp = math.sqrt(1.0 - rho * rho)

    v = v0
    for t in range(1, n_steps + 1):
        v_new = float(
            cir_transition_sample(v, kappa, lvar, vov, delta, var_rng)
        )
        # Variance shock implied by the Euler form of the same step; the
        # price shock is correlated with it at rate rho.
        scale = vov * math.sqrt(max(v, _V_FLOOR) * delta)
        z_var = (v_new - v - kappa * (lvar - v) * delta) / scale
        z_price = rho * z_var + rho_perp * z_perp[t - 1]
        log_s += (rate - 0.5 * v) * delta + math.sqrt(max(v, 0.0) * delta) * z_price
        v = v_new
        v_path[t] = v
        s_path[t] = math.exp(log_s)

    unit = kernel(th).unit_call(v_path[1:])  # (n_steps, m)
    obs = s_path[1:, None] * unit + sd * eps

    return Trajectory(
        states=v_path[:, None],
        observations=obs,
        seed=_seed_record(root_ss),
        exog=s_path,
        state_noise=None,
        obs_noise=eps if store_noise else None,
        diagnostics={"min_variance": float(v_path.min())},
    )


def build(theta0, options: dict) -> ModelSpec:
    kappa, lvar, vov, rho = (float(v) for v in theta0)
    params = HestonParams(
        kappa=kappa,
        long_run_var=lvar,
        vol_of_var=vov,
        rho=rho,
        rate=float(options.get("rate", 0.05)),
        v0=float(options.get("v0", 0.03)),
        s0=float(options.get("s0", 100.0)),
    )
    grid = ObservationGrid(
        strike_fracs=tuple(options.get("strike_fracs", (0.90, 1.00, 1.10))),
        maturities=tuple(options.get("maturities", (0.1, 0.5, 1.0))),
    )
    sd = options.get("obs_noise_sd")
    return make_heston(
        params,
        grid=grid,
        obs_noise_sd=None if sd is None else float(sd),
        delta=float(options.get("delta", _DEFAULT_DELTA)),
    )
