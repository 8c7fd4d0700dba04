"""State-space model abstraction and trajectory simulation.

Models are discrete-time with additive Gaussian noise:

    x_t = b(theta, x_{t-1}) + beta(theta, x_{t-1}) @ eta_t
    y_t = h(theta, x_t)     + sigma(theta) @ eps_t

where ``eta_t`` and ``eps_t`` are independent standard normal draws.
``A`` and ``C`` are the state Jacobians of ``b`` and ``h``; model
families supply them analytically, with :func:`fd_jacobian` available as
a central-difference fallback.  Observation functions receive an
optional per-step exogenous context ``s`` (used e.g. for an externally
supplied price path); families that do not need it ignore the argument.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

__all__ = [
    "DomainError",
    "InadmissibleParameterError",
    "LinearizedStep",
    "ModelSpec",
    "ParamVector",
    "ScalarModelFns",
    "Trajectory",
    "fd_jacobian",
    "linearize",
    "simulate",
]


class InadmissibleParameterError(ValueError):
    """Parameter vector violates a model-family constraint."""


class DomainError(ValueError):
    """A model function was evaluated outside its domain."""


# ======================================================================
# parameter vectors
# ======================================================================


@dataclass(frozen=True)
class ParamVector:
    """Named, ordered parameter vector.

    Supports entrywise ``+`` and ``-`` against another :class:`ParamVector`
    with identical labels, or against a plain array of matching length.
    """

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != vals.size:
            raise ValueError(
                f"{vals.size} values but {len(self.labels)} labels"
            )

    @property
    def dim(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None):
        return np.asarray(self.values, dtype=dtype)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.values[self.labels.index(key)]
        return self.values[key]

    def _coerce(self, other) -> np.ndarray:
        if isinstance(other, ParamVector):
            if other.labels != self.labels:
                raise ValueError(
                    f"label mismatch: {self.labels} vs {other.labels}"
                )
            return other.values
        arr = np.asarray(other, dtype=float).reshape(-1)
        if arr.size != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {arr.size}")
        return arr

    def __add__(self, other) -> "ParamVector":
        return ParamVector(self.values + self._coerce(other), self.labels)

    def __sub__(self, other) -> "ParamVector":
        return ParamVector(self.values - self._coerce(other), self.labels)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=float), self.labels)

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in zip(self.labels, self.values)}

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v:.6g}" for k, v in self.as_dict().items())
        return f"ParamVector({inner})"


@dataclass(frozen=True)
class ScalarModelFns:
    """Plain-float model callables for the scalar filter fast path.

    ``b``, ``h``, ``A``, ``C``, ``beta`` take ``(theta_tuple, x)`` and
    return a float; ``sigma`` takes ``theta_tuple`` only.
    """

    b: Callable
    h: Callable
    A: Callable
    C: Callable
    beta: Callable
    sigma: Callable


def _no_constraint(theta: np.ndarray) -> Optional[str]:
    return None


# ======================================================================
# model specification
# ======================================================================


@dataclass(frozen=True)
class ModelSpec:
    """Bundle of callables and dimensions defining one model family.

    Args:
        name: family identifier (used in reports and serialization).
        state_dim / obs_dim: dimensions n and m.
        theta_labels: names of the estimable parameters, fixing their order.
        b, A: state transition mean and its state Jacobian, ``f(theta, x)``.
        h, C: observation mean and its state Jacobian,
            ``f(theta, x, s)`` with ``s`` the per-step exogenous context
            (``None`` for families without one).
        beta: state noise factor ``beta(theta, x)``, shape (n, n).
        sigma: observation noise factor ``sigma(theta)``, shape (m, m).
        x0_mean, x0_cov: initial state law.
        linear: True when b and h are linear in x with state-independent
            coefficients (enables the plain Kalman mode).
        admissible: returns a violation message for a bad theta, else None.
        theta_bounds: optional hard bounds on theta entries, as a list of
            (lo, hi) pairs with None for unbounded.
        simulate_fn: optional custom trajectory sampler for families whose
            exact transition is not the additive-Gaussian recursion.
        fast: optional scalar fast-path callables (n == m == 1 only).
        exog: optional exogenous context array of length n_steps + 1;
            entry t is passed to ``h``/``C`` at step t.
    """

    name: str
    state_dim: int
    obs_dim: int
    theta_labels: tuple[str, ...]
    b: Callable
    h: Callable
    A: Callable
    C: Callable
    beta: Callable
    sigma: Callable
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    linear: bool = False
    admissible: Callable[[np.ndarray], Optional[str]] = _no_constraint
    theta_bounds: Optional[tuple] = None
    simulate_fn: Optional[Callable] = None
    fast: Optional[ScalarModelFns] = None
    exog: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(
            self, "x0_mean", np.asarray(self.x0_mean, dtype=float).reshape(-1)
        )
        object.__setattr__(
            self,
            "x0_cov",
            np.asarray(self.x0_cov, dtype=float).reshape(
                self.state_dim, self.state_dim
            ),
        )
        if self.x0_mean.size != self.state_dim:
            raise ValueError("x0_mean has wrong dimension")

    @property
    def theta_dim(self) -> int:
        return len(self.theta_labels)

    def theta_array(self, theta) -> np.ndarray:
        arr = np.asarray(theta, dtype=float).reshape(-1)
        if arr.size != self.theta_dim:
            raise ValueError(
                f"theta has {arr.size} entries, expected {self.theta_dim} "
                f"({self.theta_labels})"
            )
        return arr

    def param_vector(self, values) -> ParamVector:
        return ParamVector(self.theta_array(values), self.theta_labels)

    def check_admissible(self, theta) -> np.ndarray:
        arr = self.theta_array(theta)
        msg = self.admissible(arr)
        if msg:
            raise InadmissibleParameterError(f"{self.name}: {msg}")
        return arr

    def Q(self, theta, x) -> np.ndarray:
        bmat = np.atleast_2d(self.beta(theta, x))
        return bmat @ bmat.T

    def R(self, theta) -> np.ndarray:
        smat = np.atleast_2d(self.sigma(theta))
        return smat @ smat.T

    def exog_at(self, t: int):
        return None if self.exog is None else self.exog[t]

    def with_exog(self, exog) -> "ModelSpec":
        return dataclasses.replace(self, exog=np.asarray(exog, dtype=float))


class LinearizedStep(NamedTuple):
    A: np.ndarray
    C: np.ndarray
    u: np.ndarray
    d: np.ndarray


def linearize(model: ModelSpec, theta, x_prev, x_pred, s=None) -> LinearizedStep:
    """Affine coefficients of the model around given linearization points.

    The transition is linearized at ``x_prev`` and the observation at
    ``x_pred``:  b(theta, x) ~= u + A x  and  h(theta, x) ~= d + C x.
    For linear families u and d vanish identically.
    """
    th = model.theta_array(theta)
    x_prev = np.asarray(x_prev, dtype=float).reshape(-1)
    x_pred = np.asarray(x_pred, dtype=float).reshape(-1)
    A = np.atleast_2d(model.A(th, x_prev))
    u = np.asarray(model.b(th, x_prev), dtype=float).reshape(-1) - A @ x_prev
    C = np.atleast_2d(model.C(th, x_pred, s))
    d = np.asarray(model.h(th, x_pred, s), dtype=float).reshape(-1) - C @ x_pred
    return LinearizedStep(A=A, C=C, u=u, d=d)


def fd_jacobian(f: Callable, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``.

    Step per coordinate is ``rel_step * max(1, |x_i|)``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    f0 = np.asarray(f(x), dtype=float).reshape(-1)
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        step = rel_step * max(1.0, abs(x[i]))
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        jac[:, i] = (
            np.asarray(f(hi), dtype=float).reshape(-1)
            - np.asarray(f(lo), dtype=float).reshape(-1)
        ) / (2.0 * step)
    return jac


# ======================================================================
# trajectories
# ======================================================================


@dataclass
class Trajectory:
    """One simulated path of states and observations.

    ``states`` has shape (N+1, n) with row 0 the initial state;
    ``observations`` has shape (N, m) with row t-1 holding y_t.
    ``state_noise``/``obs_noise`` keep the raw standard normal draws when
    the sampler recorded them; ``exog`` is the per-step context array
    (length N+1) for families that generate one.
    """

    states: np.ndarray
    observations: np.ndarray
    seed: object
    exog: Optional[np.ndarray] = None
    state_noise: Optional[np.ndarray] = None
    obs_noise: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.observations = np.atleast_2d(
            np.asarray(self.observations, dtype=float)
        )
        if self.states.ndim != 2 or self.observations.ndim != 2:
            raise ValueError("states and observations must be 2-d arrays")
        if self.states.shape[0] != self.observations.shape[0] + 1:
            raise ValueError(
                "need exactly one more state row than observation rows: "
                f"{self.states.shape[0]} vs {self.observations.shape[0]}"
            )

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    def to_csv(self, path) -> None:
        """Write rows (t, x_1..x_n, y_1..y_m); y columns are empty at t=0."""
        n, m = self.state_dim, self.obs_dim
        header = (
            ["t"]
            + [f"x_{i + 1}" for i in range(n)]
            + [f"y_{j + 1}" for j in range(m)]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerow(
                [0] + [repr(float(v)) for v in self.states[0]] + [""] * m
            )
            for t in range(1, self.n_steps + 1):
                writer.writerow(
                    [t]
                    + [repr(float(v)) for v in self.states[t]]
                    + [repr(float(v)) for v in self.observations[t - 1]]
                )

    def save(self, path) -> None:
        """Binary round-trip serialization with the seed record embedded."""
        arrays = {"states": self.states, "observations": self.observations}
        for name in ("exog", "state_noise", "obs_noise"):
            value = getattr(self, name)
            if value is not None:
                arrays[name] = value
        meta = {"seed": _seed_record(self.seed), "diagnostics": self.diagnostics}
        arrays["meta"] = np.frombuffer(
            json.dumps(meta).encode("utf-8"), dtype=np.uint8
        )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "Trajectory":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"].tobytes()).decode("utf-8"))
            seed = meta["seed"]
            if isinstance(seed, list):
                seed = tuple(seed)
            return cls(
                states=data["states"],
                observations=data["observations"],
                seed=seed,
                exog=data["exog"] if "exog" in data else None,
                state_noise=data["state_noise"] if "state_noise" in data else None,
                obs_noise=data["obs_noise"] if "obs_noise" in data else None,
                diagnostics=meta.get("diagnostics", {}),
            )


def _seed_record(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return [int(e) for e in ent] if isinstance(ent, (tuple, list)) else int(ent)
    return seed


def seed_sequence(seed) -> np.random.SeedSequence:
    """Normalize an int, tuple of ints, or SeedSequence into a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required for reproducibility")
    return np.random.SeedSequence(seed)


# ======================================================================
# simulation
# ======================================================================


def simulate(
    model: ModelSpec,
    theta,
    n_steps: int,
    seed,
    gaussian_x0: bool = False,
    store_noise: bool = True,
) -> Trajectory:
    """Sample one trajectory of length ``n_steps`` at parameter ``theta``.

    The seed feeds independent substreams for the initial state, the
    state noise and the observation noise, so trajectories are
    reproducible and the two noise sequences never alias.  By default the
    initial state is started deterministically at ``x0_mean``;
    ``gaussian_x0=True`` draws it from N(x0_mean, x0_cov) instead.
    """
    th = model.check_admissible(theta)
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    root = seed_sequence(seed)
    if model.simulate_fn is not None:
        return model.simulate_fn(model, th, n_steps, root, gaussian_x0, store_noise)

    init_ss, state_ss, obs_ss = root.spawn(3)
    n, m = model.state_dim, model.obs_dim

    x = model.x0_mean.copy()
    if gaussian_x0 and np.any(model.x0_cov):
        chol = np.linalg.cholesky(model.x0_cov)
        x = x + chol @ np.random.default_rng(init_ss).standard_normal(n)

    eta = np.random.default_rng(state_ss).standard_normal((n_steps, n))
    eps = np.random.default_rng(obs_ss).standard_normal((n_steps, m))
    sig = np.atleast_2d(model.sigma(th))

    states = np.empty((n_steps + 1, n))
    obs = np.empty((n_steps, m))
    states[0] = x
    for t in range(1, n_steps + 1):
        bmat = np.atleast_2d(model.beta(th, x))
        x = np.asarray(model.b(th, x), dtype=float).reshape(-1) + bmat @ eta[t - 1]
        s_t = model.exog_at(t)
        obs[t - 1] = (
            np.asarray(model.h(th, x, s_t), dtype=float).reshape(-1)
            + sig @ eps[t - 1]
        )
        states[t] = x

    return Trajectory(
        states=states,
        observations=obs,
        seed=_seed_record(seed),
        exog=None if model.exog is None else np.array(model.exog),
        state_noise=eta if store_noise else None,
        obs_noise=eps if store_noise else None,
    )
