"""Reference prices: plain Monte Carlo under the Euler scheme, and Black-Scholes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .models import HestonParams, euler_step, payoff

CHUNK_PATHS = 4096


@dataclass(frozen=True)
class McEstimate:
    price: float
    std_error: float
    n_paths: int
    n_steps: int


def chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    """Random stream for a fixed-size block of paths, derived from (seed, block)."""
    return np.random.default_rng(np.random.SeedSequence([seed, chunk]))


def terminal_payoffs(p: HestonParams, n_paths: int, n_steps: int, seed: int) -> np.ndarray:
    """Undiscounted payoffs of ``n_paths`` independent Euler paths."""
    dt = p.t_mat / n_steps
    sqdt = math.sqrt(dt)
    x0 = p.initial_state()
    out = np.empty(n_paths)
    for c, lo in enumerate(range(0, n_paths, CHUNK_PATHS)):
        hi = min(lo + CHUNK_PATHS, n_paths)
        rng = chunk_rng(seed, c)
        x = np.tile(x0, (CHUNK_PATHS, 1))
        buf = np.empty_like(x)
        for i in range(n_steps):
            rng.standard_normal(out=buf)
            buf *= sqdt
            x = euler_step(p, i * dt, x, buf, dt)
        # the block is always simulated in full so results do not depend on n_paths
        out[lo:hi] = payoff(p, x[:hi - lo])[:, 0]
    return out


def mc_price(p: HestonParams, n_paths: int = 100_000, n_steps: int = 1000, seed: int = 0) -> McEstimate:
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    disc = math.exp(-p.r * p.t_mat) * terminal_payoffs(p, n_paths, n_steps, seed)
    return McEstimate(float(disc.mean()), float(disc.std(ddof=1) / math.sqrt(n_paths)),
                      n_paths, n_steps)


def bs_closed_form(s0: float, strike: float, r: float, sigma: float, t_mat: float) -> float:
    """Black-Scholes price of a European call."""
    if min(s0, strike, sigma, t_mat) <= 0:
        raise ValueError("s0, strike, sigma and t_mat must be positive")
    vol = sigma * math.sqrt(t_mat)
    d1 = (math.log(s0 / strike) + (r + 0.5 * sigma ** 2) * t_mat) / vol
    d2 = d1 - vol
    return float(s0 * ndtr(d1) - strike * math.exp(-r * t_mat) * ndtr(d2))
