"""Forward scheme: trainable initial value plus one gradient network per time step."""

from __future__ import annotations

import math
import time

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..models import Driver, HestonParams, PathBatch, default_driver, driver_eval, payoff, sample_paths
from ..nn import AdamState, MlpNet, adam_step, init_net, mlp_graph
from .common import CHUNK_ITERS, PathStream, RunStreams, Scaler, slice_batch
from .config import SolverConfig, SolverDivergence, SolverRun, decayed_lr


def terminal_values(u0, znet: MlpNet, paths: PathBatch, model: HestonParams, drv: Driver,
                    scaler: Scaler | None = None, zparams: list[Tensor] | None = None) -> Tensor:
    """Roll ``Y`` forward from ``u0`` along each path; returns ``Y_N`` as ``[batch, 1]``."""
    u0 = ad.as_tensor(u0)
    if zparams is None:
        zparams = [Tensor(p) for p in znet.params()]
    n, batch, dt = paths.n_steps, paths.batch, paths.dt
    if znet.stack != n:
        raise ValueError(f"need one Z-network per step: stack={znet.stack}, n_steps={n}")
    xs = paths.states[:, :n, :].transpose(1, 0, 2)
    z = mlp_graph(znet, Tensor(scaler(xs) if scaler else xs), zparams)
    zdw = (z * paths.dw.transpose(1, 0, 2)).sum(axis=-1, keepdims=True)
    y = ad.broadcast_to(ad.reshape(u0, (1, 1)), (batch, 1))
    for i in range(n):
        y = y + driver_eval(drv, i * dt, paths.states[:, i, :], y, z[i]) * dt + zdw[i]
    return y


def dbsde_loss(u0, znet: MlpNet, paths: PathBatch, model: HestonParams, drv: Driver,
               scaler: Scaler | None = None, zparams: list[Tensor] | None = None) -> Tensor:
    """Mean squared mismatch between the rolled-forward ``Y_N`` and the payoff."""
    y = terminal_values(u0, znet, paths, model, drv, scaler, zparams)
    diff = y - payoff(model, paths.states[:, -1, :])
    return (diff * diff).mean()


def _first_bad_path(paths: PathBatch, y: np.ndarray) -> int:
    bad = np.nonzero(~np.isfinite(y).all(axis=-1))[0]
    return int(bad[0]) if bad.size else -1


def dbsde_train(cfg: SolverConfig, model: HestonParams, drv: Driver | None = None) -> SolverRun:
    if cfg.method != "DBSDE":
        raise ValueError(f"dbsde_train needs method DBSDE, got {cfg.method}")
    drv = drv or default_driver(model)
    t_start = time.perf_counter()
    streams = RunStreams(cfg.seed)
    n = cfg.n_steps

    pilot = sample_paths(model, n, cfg.val_size, streams.pilot)
    scaler = Scaler.fit(pilot)
    val = sample_paths(model, n, cfg.val_size, streams.val)
    u0 = np.array([math.exp(-model.r * model.t_mat) * payoff(model, pilot.states[:, -1]).mean()])

    znet = init_net(model.dim, model.dim, cfg.hidden, streams.init_seed, cfg.activation, stack=n,
                    batch_norm=cfg.batch_norm)
    params = [u0] + znet.params()
    opt = AdamState.for_params(params, lr=cfg.lr)
    stream = PathStream(model, n, cfg.batch, streams.train)
    curve: list[tuple[int, float]] = []

    def val_loss() -> float:
        with ad.no_grad():
            return float(dbsde_loss(u0, znet, val, model, drv, scaler).data)

    def fail(msg: str):
        run = SolverRun(cfg, float(u0[0]), curve or [(0, float("nan"))],
                        time.perf_counter() - t_start, cfg.seed, "diverged", msg)
        raise SolverDivergence(msg, run)

    chunk = None
    for it in range(cfg.iters_forward):
        k = it % CHUNK_ITERS
        if k == 0:
            chunk = stream.chunk()
        paths = slice_batch(chunk, k, cfg.batch)
        tensors = [Tensor(p, requires_grad=True) for p in params]
        y = terminal_values(tensors[0], znet, paths, model, drv, scaler, tensors[1:])
        diff = y - payoff(model, paths.states[:, -1, :])
        loss = (diff * diff).mean()
        if not np.isfinite(loss.data):
            fail(f"non-finite training loss at iteration {it}, path {_first_bad_path(paths, y.data)}")
        grads = [g.data for g in ad.grad(loss, tensors)]
        adam_step(opt, params, grads, lr=decayed_lr(cfg, it, cfg.iters_forward))
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iters_forward:
            vl = val_loss()
            curve.append((it + 1, vl))
            if not np.isfinite(vl):
                fail(f"validation loss became non-finite at iteration {it + 1}")

    price = float(u0[0])
    return SolverRun(cfg, price, curve, time.perf_counter() - t_start, cfg.seed)
