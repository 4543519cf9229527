from __future__ import annotations

import numpy as np

from ..models import HestonParams, PathBatch, sample_paths

CHUNK_ITERS = 100


class Scaler:
    """Affine input standardisation ``(x - shift) / scale`` applied before every network.

    Statistics come from a pilot batch pooled over all time steps. Coordinates
    with no spread (e.g. variances when vol-of-vol is zero) are left unscaled.
    """

    def __init__(self, shift: np.ndarray, scale: np.ndarray):
        self.shift = np.asarray(shift, dtype=np.float64)
        self.inv_scale = 1.0 / np.asarray(scale, dtype=np.float64)

    @classmethod
    def fit(cls, paths: PathBatch) -> "Scaler":
        flat = paths.states.reshape(-1, paths.states.shape[-1])
        shift = flat.mean(axis=0)
        scale = flat.std(axis=0)
        tiny = 1e-8 * np.maximum(np.abs(shift), 1.0)
        scale = np.where(scale > tiny, scale, 1.0)
        return cls(shift, scale)

    @classmethod
    def identity(cls, dim: int) -> "Scaler":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x):
        # works for numpy arrays and autodiff tensors alike
        return (x - self.shift) * self.inv_scale


class RunStreams:
    """Independent random streams of one solver run, all derived from its seed."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        init, train, val, pilot = ss.spawn(4)
        self.init_seed = int(init.generate_state(1)[0])
        self.train = np.random.default_rng(train)
        self.val = np.random.default_rng(val)
        self.pilot = np.random.default_rng(pilot)


class PathStream:
    """Fresh training batches, simulated ``CHUNK_ITERS`` batches at a time."""

    def __init__(self, p: HestonParams, n_steps: int, batch: int, rng: np.random.Generator):
        self.p, self.n_steps, self.batch, self.rng = p, n_steps, batch, rng

    def chunk(self, n_batches: int = CHUNK_ITERS) -> PathBatch:
        return sample_paths(self.p, self.n_steps, self.batch * n_batches, self.rng)


def slice_batch(paths: PathBatch, k: int, batch: int) -> PathBatch:
    lo = k * batch
    return PathBatch(paths.states[lo:lo + batch], paths.dw[lo:lo + batch], paths.dt)
