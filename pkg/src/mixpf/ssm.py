"""State-space models: stochastic Lorenz 96, the order-parameter form of
the Kuramoto oscillator network, and a 1-d linear-Gaussian model for
oracle tests.

Both benchmark systems are Euler-Maruyama discretisations with additive
state noise sqrt(dt)*v and observation y = x + sqrt(dt)*r (identity
observation, d_y = d_x).  Kuramoto phases are wrapped into [-pi, pi)
after every step; its densities act on wrapped residuals, which equals
the exact wrapped Gaussian to machine precision for all step noise
scales used here (sigma << pi).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .distributions import gaussian_logpdf_np

TWO_PI = 2.0 * np.pi


def lorenz96_drift(x: np.ndarray, F: float) -> np.ndarray:
    """Cyclic Lorenz 96 right-hand side x_{i-1} (x_{i+1} - x_{i-2}) - x_i + F."""
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return xm1 * (xp1 - xm2) - x + F


def lorenz96_step(x: np.ndarray, F: float, dt: float, v: np.ndarray) -> np.ndarray:
    """One explicit Euler-Maruyama step of the cyclic Lorenz 96 drift.

    x_i' = x_i + dt * (x_{i-1} (x_{i+1} - x_{i-2}) - x_i + F) + sqrt(dt) v_i
    with indices wrapping cyclically; requires d_x >= 4.

    Note: this raw single-Euler map is linearly unstable on the attractor
    at dt = 0.05 (it diverges after roughly 35 steps even without noise);
    the Lorenz96 model below therefore advances the deterministic part
    with one RK4 step per observation interval.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ValueError(f"Lorenz 96 needs d_x >= 4, got {x.shape[-1]}")
    return x + dt * lorenz96_drift(x, F) + np.sqrt(dt) * v


def kuramoto_order_params(theta: np.ndarray) -> tuple[float, float]:
    """Coherence R in [0, 1] and mean phase phi of a set of oscillators.

    R exp(i phi) is the average of the unit phasors exp(i theta_j);
    phi is 0 by convention when R = 0.
    """
    theta = np.asarray(theta, dtype=np.float64)
    sm = np.sin(theta).mean(axis=-1)
    cm = np.cos(theta).mean(axis=-1)
    R = np.hypot(sm, cm)
    phi = np.where(R > 0, np.arctan2(sm, cm), 0.0)
    return float(R) if np.ndim(R) == 0 else R, float(phi) if np.ndim(phi) == 0 else phi


def kuramoto_step(
    x: np.ndarray, omega: np.ndarray, C: float, dt: float, v: np.ndarray
) -> np.ndarray:
    """One Euler-Maruyama step of the coupled-oscillator drift (unwrapped).

    Uses the identity R sin(phi - x_i) = mean(sin x) cos x_i - mean(cos x) sin x_i,
    which avoids forming R and phi explicitly and vectorises over particle rows.
    """
    x = np.asarray(x, dtype=np.float64)
    sm = np.sin(x).mean(axis=-1, keepdims=True)
    cm = np.cos(x).mean(axis=-1, keepdims=True)
    drift = omega + C * (sm * np.cos(x) - cm * np.sin(x))
    return x + dt * drift + np.sqrt(dt) * v


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Map angles into [-pi, pi)."""
    return np.mod(x + np.pi, TWO_PI) - np.pi


class StateSpaceModel:
    """Transition/observation densities and samplers shared by the filter,
    the simulator and the oracle baselines."""

    name = "base"
    periodic = False

    def __init__(self, d_x: int, d_y: int):
        self.d_x = d_x
        self.d_y = d_y

    # -- deterministic pieces ------------------------------------------------
    def transition_mean(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transition_mean_var(self, X: Var) -> Var:
        """Tape version of transition_mean over particle rows."""
        raise NotImplementedError

    def transition_scale(self) -> np.ndarray:
        raise NotImplementedError

    def observation_scale(self) -> np.ndarray:
        raise NotImplementedError

    def wrap(self, x: np.ndarray) -> np.ndarray:
        return x

    def _wrap_residual(self, delta: np.ndarray) -> np.ndarray:
        return wrap_phase(delta) if self.periodic else delta

    # -- sampling ------------------------------------------------------------
    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def transition_sample(self, rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
        eps = rng.standard_normal(x.shape)
        return self.wrap(self.transition_mean(x) + self.transition_scale() * eps)

    def observation_sample(self, rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
        return x + self.observation_scale() * rng.standard_normal(x.shape)

    # -- densities -----------------------------------------------------------
    def transition_logpdf(self, x_t: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        delta = self._wrap_residual(np.asarray(x_t) - self.transition_mean(x_prev))
        return gaussian_logpdf_np(np.zeros(self.d_x), self.transition_scale(), delta)

    def observation_logpdf(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        delta = self._wrap_residual(np.asarray(y) - np.asarray(x))
        return gaussian_logpdf_np(np.zeros(self.d_y), self.observation_scale(), delta)

    def descriptor(self) -> dict:
        raise NotImplementedError


class Lorenz96(StateSpaceModel):
    """Stochastic Lorenz 96 with cyclic coupling and identity observation.

    The transition kernel is x_{t+1} ~ N(Phi(x_t), dt * sigma_v^2 I) where
    Phi is one RK4 step of the drift over the observation interval dt.  A
    single forward-Euler step at dt = 0.05 diverges after ~35 steps, so the
    long series used by the benchmarks would not exist under it; RK4 keeps
    the discrete trajectory on the usual bounded attractor (|x| < 25).
    """

    name = "lorenz96"

    def __init__(self, d_x=20, F=8.0, dt=0.05, sigma_v=0.5, sigma_r=np.sqrt(0.1)):
        if d_x < 4:
            raise ValueError(f"Lorenz 96 needs d_x >= 4, got {d_x}")
        super().__init__(d_x, d_x)
        self.F = float(F)
        self.dt = float(dt)
        self.sigma_v = float(sigma_v)
        self.sigma_r = float(sigma_r)
        d = d_x
        self._im1 = (np.arange(d) - 1) % d
        self._im2 = (np.arange(d) - 2) % d
        self._ip1 = (np.arange(d) + 1) % d

    def transition_mean(self, x):
        x = np.asarray(x, dtype=np.float64)
        F, dt = self.F, self.dt
        k1 = lorenz96_drift(x, F)
        k2 = lorenz96_drift(x + 0.5 * dt * k1, F)
        k3 = lorenz96_drift(x + 0.5 * dt * k2, F)
        k4 = lorenz96_drift(x + dt * k3, F)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def _drift_var(self, X: Var) -> Var:
        take = ad.take_columns if X.value.ndim == 2 else ad.gather
        return take(X, self._im1) * (take(X, self._ip1) - take(X, self._im2)) - X + self.F

    def transition_mean_var(self, X: Var) -> Var:
        dt = self.dt
        k1 = self._drift_var(X)
        k2 = self._drift_var(X + (0.5 * dt) * k1)
        k3 = self._drift_var(X + (0.5 * dt) * k2)
        k4 = self._drift_var(X + dt * k3)
        return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def transition_scale(self):
        return np.full(self.d_x, np.sqrt(self.dt) * self.sigma_v)

    def observation_scale(self):
        return np.full(self.d_y, np.sqrt(self.dt) * self.sigma_r)

    def initial_state(self, rng):
        x0 = np.zeros(self.d_x)
        x0[0] = 1.0
        return x0

    def descriptor(self):
        return {
            "system": self.name,
            "d_x": self.d_x,
            "F": self.F,
            "dt": self.dt,
            "sigma_v": self.sigma_v,
            "sigma_r": self.sigma_r,
        }


class Kuramoto(StateSpaceModel):
    """Coupled phase oscillators in order-parameter form, phases wrapped
    into [-pi, pi); natural frequencies are fixed per model instance."""

    name = "kuramoto"
    periodic = True

    def __init__(self, d_x=20, C=0.8, dt=0.05, sigma_v=0.1, sigma_r=0.005,
                 omega=None, omega_seed=0):
        super().__init__(d_x, d_x)
        self.C = float(C)
        self.dt = float(dt)
        self.sigma_v = float(sigma_v)
        self.sigma_r = float(sigma_r)
        if omega is None:
            omega_rng = np.random.default_rng(
                np.random.SeedSequence([int(omega_seed), 0x6B75])
            )
            omega = 0.5 + 0.5 * omega_rng.standard_normal(d_x)
        self.omega = np.asarray(omega, dtype=np.float64)
        if self.omega.shape != (d_x,):
            raise ValueError(f"omega must have shape ({d_x},)")

    def transition_mean(self, x):
        x = np.asarray(x, dtype=np.float64)
        sm = np.sin(x).mean(axis=-1, keepdims=True)
        cm = np.cos(x).mean(axis=-1, keepdims=True)
        drift = self.omega + self.C * (sm * np.cos(x) - cm * np.sin(x))
        return x + self.dt * drift

    def transition_mean_var(self, X: Var) -> Var:
        batched = X.value.ndim == 2
        sin_x = ad.sin(X)
        cos_x = ad.cos(X)
        axis = 1 if batched else None
        sm = ad.vsum(sin_x, axis=axis) * (1.0 / self.d_x)
        cm = ad.vsum(cos_x, axis=axis) * (1.0 / self.d_x)
        if batched:
            sm = ad.reshape(sm, (X.value.shape[0], 1))
            cm = ad.reshape(cm, (X.value.shape[0], 1))
        drift = X.tape.constant(self.omega) + self.C * (sm * cos_x - cm * sin_x)
        return X + self.dt * drift

    def transition_scale(self):
        return np.full(self.d_x, np.sqrt(self.dt) * self.sigma_v)

    def observation_scale(self):
        return np.full(self.d_y, np.sqrt(self.dt) * self.sigma_r)

    def wrap(self, x):
        return wrap_phase(x)

    def initial_state(self, rng):
        return rng.uniform(-np.pi, np.pi, self.d_x)

    def descriptor(self):
        return {
            "system": self.name,
            "d_x": self.d_x,
            "C": self.C,
            "dt": self.dt,
            "sigma_v": self.sigma_v,
            "sigma_r": self.sigma_r,
            "omega": self.omega.tolist(),
        }


class LinearGaussian1D(StateSpaceModel):
    """x_t = a x_{t-1} + N(0, q); y_t = x_t + N(0, r).  q, r are variances.
    Used as the closed-form Kalman reference case."""

    name = "linear_gaussian_1d"

    def __init__(self, a=0.9, q=0.5, r=0.5, x0_mean=0.0, x0_var=1.0):
        super().__init__(1, 1)
        self.a, self.q, self.r = float(a), float(q), float(r)
        self.x0_mean, self.x0_var = float(x0_mean), float(x0_var)

    def transition_mean(self, x):
        return self.a * np.asarray(x, dtype=np.float64)

    def transition_mean_var(self, X: Var) -> Var:
        return X * self.a

    def transition_scale(self):
        return np.array([np.sqrt(self.q)])

    def observation_scale(self):
        return np.array([np.sqrt(self.r)])

    def initial_state(self, rng):
        return self.x0_mean + np.sqrt(self.x0_var) * rng.standard_normal(1)

    def descriptor(self):
        return {
            "system": self.name,
            "a": self.a,
            "q": self.q,
            "r": self.r,
            "x0_mean": self.x0_mean,
            "x0_var": self.x0_var,
        }


_DEFAULT_BURN_IN = {"kuramoto": 200}


def make_model(descriptor: dict) -> StateSpaceModel:
    """Rebuild a model from its descriptor dict (sidecar round-trip)."""
    desc = dict(descriptor)
    system = desc.pop("system")
    if system == "lorenz96":
        return Lorenz96(**desc)
    if system == "kuramoto":
        return Kuramoto(**desc)
    if system == "linear_gaussian_1d":
        return LinearGaussian1D(**desc)
    raise ValueError(f"unknown system {system!r}")


def default_burn_in(model: StateSpaceModel) -> int:
    return _DEFAULT_BURN_IN.get(model.name, 0)


@dataclass
class Trajectory:
    """Ground-truth states x_{0:T} and observations y_{1:T} plus provenance."""

    states: np.ndarray        # (T+1, d_x)
    observations: np.ndarray  # (T, d_y)
    seed: int
    descriptor: dict
    burn_in: int = 0

    @property
    def T(self) -> int:
        return self.observations.shape[0]

    def series_hash(self) -> str:
        import hashlib

        return hashlib.sha256(self.observations.astype("<f8").tobytes()).hexdigest()[:16]


def simulate(model: StateSpaceModel, T: int, seed: int, burn_in: int | None = None) -> Trajectory:
    """Simulate a ground-truth trajectory with its observation series.

    Burn-in steps run the dynamics without recording anything; the
    post-burn-in state becomes x_0.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if burn_in is None:
        burn_in = default_burn_in(model)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A11]))
    x = model.initial_state(rng)
    for _ in range(burn_in):
        x = model.transition_sample(rng, x)
    states = np.empty((T + 1, model.d_x))
    obs = np.empty((T, model.d_y))
    states[0] = x
    for t in range(1, T + 1):
        x = model.transition_sample(rng, x)
        states[t] = x
        obs[t - 1] = model.observation_sample(rng, x)
    return Trajectory(states, obs, int(seed), model.descriptor(), burn_in)


def reobserve(model: StateSpaceModel, traj: Trajectory, seed: int) -> Trajectory:
    """A fresh observation realisation of an existing latent path.

    The hidden states are shared; only the observation noise is redrawn.
    This is how paired evaluation series are generated: distinct
    observation series over one ground-truth trajectory.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0B5E]))
    obs = np.empty_like(traj.observations)
    for t in range(traj.T):
        obs[t] = model.observation_sample(rng, traj.states[t + 1])
    return Trajectory(traj.states, obs, int(seed), traj.descriptor, traj.burn_in)


# ---------------------------------------------------------------------------
# trajectory files: CSV + JSON sidecar

def save_trajectory(traj: Trajectory, csv_path) -> None:
    csv_path = Path(csv_path)
    d_x = traj.states.shape[1]
    d_y = traj.observations.shape[1]
    header = ["t"] + [f"x_{i+1}" for i in range(d_x)] + [f"y_{i+1}" for i in range(d_y)]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerow([0] + [repr(float(v)) for v in traj.states[0]] + [""] * d_y)
        for t in range(1, traj.T + 1):
            w.writerow(
                [t]
                + [repr(float(v)) for v in traj.states[t]]
                + [repr(float(v)) for v in traj.observations[t - 1]]
            )
    sidecar = {
        "model": traj.descriptor,
        "seed": traj.seed,
        "T": traj.T,
        "burn_in": traj.burn_in,
        "series_hash": traj.series_hash(),
    }
    with open(csv_path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_trajectory(csv_path) -> Trajectory:
    csv_path = Path(csv_path)
    with open(csv_path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d_x = sum(1 for h in header if h.startswith("x_"))
    d_y = sum(1 for h in header if h.startswith("y_"))
    T = len(rows) - 2
    states = np.empty((T + 1, d_x))
    obs = np.empty((T, d_y))
    for row in rows[1:]:
        t = int(row[0])
        states[t] = [float(v) for v in row[1 : 1 + d_x]]
        if t > 0:
            obs[t - 1] = [float(v) for v in row[1 + d_x :]]
    return Trajectory(states, obs, sidecar["seed"], sidecar["model"], sidecar["burn_in"])
