"""Multi-asset Heston market, Euler paths, best-of call payoff and BSDE driver.

The state vector has ``2d`` coordinates: the ``d`` asset prices followed by
the ``d`` instantaneous variances. The Brownian motion has the same layout:
the first ``d`` components drive the prices, the last ``d`` are the parts of
the variance noise orthogonal to the price noise. Assets are independent of
each other; ``rho`` only couples an asset's price with its own variance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from typing import Callable, Mapping

import numpy as np


class FellerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class HestonParams:
    d: int = 20
    s0: float = 100.0
    r: float = 0.05
    t_mat: float = 1.0
    nu0: float = 0.1
    theta: float = 0.1
    rho: float = 0.0
    kappa: float = 2.0
    xi: float = 0.1
    moneyness: float = 1.2

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if self.s0 <= 0 or self.t_mat <= 0 or self.kappa <= 0:
            raise ValueError("s0, t_mat and kappa must be positive")
        if self.nu0 < 0 or self.theta < 0 or self.xi < 0:
            raise ValueError("nu0, theta and xi must be nonnegative")
        if abs(self.rho) > 1:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        if self.moneyness <= 0:
            raise ValueError("moneyness must be positive")
        if self.xi > 0 and not feller_check(self):
            warnings.warn(
                f"Feller condition 2*kappa*theta > xi^2 violated "
                f"({2 * self.kappa * self.theta:g} <= {self.xi ** 2:g})",
                FellerWarning, stacklevel=3)

    @property
    def strike(self) -> float:
        return self.s0 / self.moneyness

    @property
    def dim(self) -> int:
        return 2 * self.d

    def replace(self, **changes) -> "HestonParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return HestonParams(**kw)

    def initial_state(self) -> np.ndarray:
        return np.concatenate([np.full(self.d, float(self.s0)), np.full(self.d, float(self.nu0))])


# config-file key -> field name
CONFIG_KEYS = {"d": "d", "s0": "s0", "r": "r", "T": "t_mat", "nu0": "nu0", "theta": "theta",
               "rho": "rho", "kappa": "kappa", "xi": "xi", "moneyness": "moneyness"}


def params_from_config(section: Mapping[str, str]) -> HestonParams:
    kw = {}
    for key, value in section.items():
        if key not in CONFIG_KEYS:
            raise KeyError(f"unknown market key {key!r}; valid keys: {sorted(CONFIG_KEYS)}")
        name = CONFIG_KEYS[key]
        kw[name] = int(value) if name == "d" else float(value)
    return HestonParams(**kw)


def params_to_config(p: HestonParams) -> dict[str, str]:
    return {key: repr(getattr(p, name)) for key, name in CONFIG_KEYS.items()}


def feller_check(p: HestonParams) -> bool:
    return 2.0 * p.kappa * p.theta > p.xi ** 2


@dataclass
class MarketState:
    prices: np.ndarray
    variances: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.prices, self.variances])


def _split(p: HestonParams, state):
    x = np.asarray(state, dtype=np.float64)
    return x[..., :p.d], x[..., p.d:]


def drift(p: HestonParams, t: float, state) -> np.ndarray:
    """Risk-neutral drift; works on a single state ``[2d]`` or a batch ``[b, 2d]``."""
    s, v = _split(p, state)
    return np.concatenate([p.r * s, p.kappa * (p.theta - np.maximum(v, 0.0))], axis=-1)


def diffusion(p: HestonParams, t: float, state) -> np.ndarray:
    """Diffusion matrix ``[2d, 2d]`` (or ``[b, 2d, 2d]`` for a batch of states)."""
    s, v = _split(p, state)
    sq = np.sqrt(np.maximum(v, 0.0))
    d = p.d
    out = np.zeros(s.shape[:-1] + (2 * d, 2 * d))
    k = np.arange(d)
    out[..., k, k] = s * sq
    out[..., d + k, k] = p.xi * p.rho * sq
    out[..., d + k, d + k] = p.xi * math.sqrt(1.0 - p.rho ** 2) * sq
    return out


def sigma_t_apply(p: HestonParams, state: np.ndarray):
    """Coefficients ``(a, b, c)`` with ``sigma^T g = [a*g_S + b*g_nu, c*g_nu]``.

    Returned as arrays shaped like the price block so callers can apply the
    transpose diffusion to either numpy arrays or autodiff tensors.
    """
    s, v = _split(p, state)
    sq = np.sqrt(np.maximum(v, 0.0))
    return s * sq, p.xi * p.rho * sq, p.xi * math.sqrt(1.0 - p.rho ** 2) * sq


def sigma_t_grad(p: HestonParams, state: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``sigma(t, x)^T grad`` for a batch, in numpy."""
    a, b, c = sigma_t_apply(p, state)
    gs, gv = grad[..., :p.d], grad[..., p.d:]
    return np.concatenate([a * gs + b * gv, c * gv], axis=-1)


def euler_step(p: HestonParams, t: float, x: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """One full-truncation Euler step for a batch ``[b, 2d]``."""
    x = np.asarray(x, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    if x.shape != dw.shape:
        raise ValueError(f"state shape {x.shape} != increment shape {dw.shape}")
    if not (np.isfinite(x).all() and np.isfinite(dw).all()):
        raise ValueError("euler_step received non-finite state or increment")
    d = p.d
    s, v = x[..., :d], x[..., d:]
    dws, dwv = dw[..., :d], dw[..., d:]
    sq = np.sqrt(np.maximum(v, 0.0))
    s_next = s + p.r * s * dt + s * sq * dws
    v_next = (v + p.kappa * (p.theta - np.maximum(v, 0.0)) * dt
              + p.xi * sq * (p.rho * dws + math.sqrt(1.0 - p.rho ** 2) * dwv))
    return np.concatenate([s_next, v_next], axis=-1)


@dataclass
class PathBatch:
    states: np.ndarray  # [batch, n_steps + 1, 2d]
    dw: np.ndarray      # [batch, n_steps, 2d]
    dt: float

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def _euler_paths(p: HestonParams, dw: np.ndarray, dt: float) -> np.ndarray:
    batch, n_steps, dim = dw.shape
    states = np.empty((batch, n_steps + 1, dim))
    states[:, 0, :] = p.initial_state()
    for i in range(n_steps):
        states[:, i + 1, :] = euler_step(p, i * dt, states[:, i, :], dw[:, i, :], dt)
    return states


def sample_paths(p: HestonParams, n_steps: int, batch: int, rng: np.random.Generator) -> PathBatch:
    """Draw a fresh batch of Euler paths from an existing generator."""
    if n_steps < 1 or batch < 1:
        raise ValueError("n_steps and batch must be at least 1")
    dt = p.t_mat / n_steps
    dw = rng.standard_normal((batch, n_steps, p.dim)) * math.sqrt(dt)
    return PathBatch(_euler_paths(p, dw, dt), dw, dt)


def simulate_paths(p: HestonParams, n_steps: int, batch: int, seed: int) -> PathBatch:
    return sample_paths(p, n_steps, batch, np.random.default_rng(seed))


def replay_paths(p: HestonParams, dw: np.ndarray, dt: float) -> np.ndarray:
    """Recompute the Euler states implied by stored increments."""
    return _euler_paths(p, np.asarray(dw, dtype=np.float64), dt)


def payoff(p: HestonParams, terminal) -> np.ndarray:
    """Best-of call ``max(max_i S_i - K, 0)`` for states ``[b, 2d]`` -> ``[b, 1]``."""
    s, _ = _split(p, terminal)
    return np.maximum(s.max(axis=-1, keepdims=True) - p.strike, 0.0)


def payoff_grad(p: HestonParams, terminal) -> np.ndarray:
    """A subgradient of the payoff in the state: 1 on the best in-the-money price."""
    x = np.asarray(terminal, dtype=np.float64)
    s = x[..., :p.d]
    out = np.zeros_like(x)
    best = s.argmax(axis=-1)
    itm = s.max(axis=-1) > p.strike
    rows = np.nonzero(itm)[0]
    out[rows, best[rows]] = 1.0
    return out


# ---------------------------------------------------------------- driver

DriverFn = Callable[[float, np.ndarray, object, object], object]


@dataclass(frozen=True)
class Driver:
    """Nonlinearity ``f(t, x, y, z)`` of the semilinear PDE.

    ``y`` and ``z`` may be numpy arrays or autodiff tensors; ``fn`` must only
    combine them with arithmetic the two types share.
    """

    fn: DriverFn
    name: str = "custom"
    uses_z: bool = True


def rate_driver(r: float) -> Driver:
    return Driver(lambda t, x, y, z: y * r, name=f"rate({r!r})", uses_z=False)


def default_driver(p: HestonParams) -> Driver:
    return rate_driver(p.r)


def driver_eval(drv: Driver, t: float, x, y, z):
    return drv.fn(t, x, y, z)
