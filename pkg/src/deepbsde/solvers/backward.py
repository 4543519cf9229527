"""Backward schemes: DBDP1, DBDP2, Deep Splitting and the multistep MDBDP.

Each trains one value network ``U_i`` per time step (plus a gradient network
``V_i`` for DBDP1/MDBDP), from maturity back to time zero. The terminal value
network is the payoff itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..models import (Driver, HestonParams, PathBatch, default_driver, driver_eval, payoff,
                      payoff_grad, sample_paths, sigma_t_apply, sigma_t_grad)
from ..nn import (AdamState, MlpNet, adam_step, apply, init_net, input_gradient, mlp_graph,
                  update_running_stats)
from .common import CHUNK_ITERS, PathStream, RunStreams, Scaler, slice_batch
from .config import SolverConfig, SolverDivergence, SolverRun, decayed_lr


@dataclass
class StepNets:
    """Trained networks indexed by time step; ``u[i]``/``v[i]`` for ``i < n_steps``."""

    n_steps: int
    scaler: Scaler
    u: dict[int, MlpNet] = field(default_factory=dict)
    v: dict[int, MlpNet] = field(default_factory=dict)

    def value(self, model: HestonParams, i: int, x: np.ndarray) -> np.ndarray:
        if i == self.n_steps:
            return payoff(model, x)
        return apply(self.u[i], self.scaler(x))

    def value_grad(self, model: HestonParams, i: int, x: np.ndarray) -> np.ndarray:
        """Gradient of the step-``i`` value function w.r.t. the raw state."""
        if i == self.n_steps:
            return payoff_grad(model, x)
        return input_gradient(self.u[i], self.scaler(x)) * self.scaler.inv_scale

    def z(self, model: HestonParams, i: int, x: np.ndarray) -> np.ndarray:
        """``sigma^T grad u`` at step ``i``: the V-network if there is one, else autodiff."""
        if i in self.v:
            return apply(self.v[i], self.scaler(x))
        return sigma_t_grad(model, x, self.value_grad(model, i, x))


def _residual(target, u, fdt, vdw):
    # shared by every scheme so MDBDP at the last step reproduces DBDP bit for bit
    return target - u - fdt - vdw


def _dot_last(a, b):
    return (a * b).sum(axis=-1, keepdims=True)


def _sigma_t_tensor(model: HestonParams, x: np.ndarray, g: Tensor) -> Tensor:
    a, b, c = sigma_t_apply(model, x)
    d = model.d
    gs, gv = g[:, :d], g[:, d:]
    return ad.concat([gs * a + gv * b, gv * c], axis=-1)


def _value_and_z(method: str, model: HestonParams, scaler: Scaler, x: np.ndarray,
                 unet: MlpNet, uparams: list[Tensor], vnet: MlpNet | None,
                 vparams: list[Tensor] | None, ustats=None, vstats=None):
    """Trainable ``U_i(x)`` and ``V_i(x)`` as tensors."""
    if method == "DBDP2":
        # frozen batch statistics keep each row's gradient a per-sample quantity
        xt = Tensor(x, requires_grad=True)
        u = mlp_graph(unet, scaler(xt), uparams, ustats, freeze_stats=True)
        (gx,) = ad.grad(u, [xt], grad_output=np.ones(u.shape), create_graph=True)
        return u, _sigma_t_tensor(model, x, gx)
    u = mlp_graph(unet, Tensor(scaler(x)), uparams, ustats)
    if vnet is None:
        return u, None
    return u, mlp_graph(vnet, Tensor(scaler(x)), vparams, vstats)


# ---------------------------------------------------------------- frozen targets

def frozen_target(method: str, model: HestonParams, drv: Driver, nets: StepNets,
                  paths: PathBatch, i: int) -> np.ndarray:
    """Everything in the step-``i`` residual that does not depend on ``U_i``/``V_i``.

    DBDP1/DBDP2: ``U_{i+1}(X_{i+1})``. DS: the same minus the explicit driver term.
    MDBDP: the payoff minus the accumulated driver and martingale terms of later steps.
    """
    n, dt = paths.n_steps, paths.dt
    if method in ("DBDP1", "DBDP2"):
        return nets.value(model, i + 1, paths.states[:, i + 1])
    if method == "DS":
        x_next = paths.states[:, i + 1]
        u_next = nets.value(model, i + 1, x_next)
        if drv.uses_z:
            z_next = sigma_t_grad(model, paths.states[:, i], nets.value_grad(model, i + 1, x_next))
        else:
            z_next = np.zeros_like(x_next)
        return u_next - driver_eval(drv, i * dt, x_next, u_next, z_next) * dt
    if method == "MDBDP":
        acc = np.zeros((paths.batch, 1))
        for j in range(i + 1, n):
            xj = paths.states[:, j]
            uj = nets.value(model, j, xj)
            zj = nets.z(model, j, xj)
            acc += driver_eval(drv, j * dt, xj, uj, zj) * dt + _dot_last(zj, paths.dw[:, j])
        return payoff(model, paths.states[:, n]) - acc
    raise ValueError(f"not a backward method: {method}")


def _step_loss(method: str, model: HestonParams, drv: Driver, scaler: Scaler, paths: PathBatch,
               i: int, target: np.ndarray, unet: MlpNet, uparams, vnet=None, vparams=None,
               ustats=None, vstats=None) -> Tensor:
    dt = paths.dt
    xi = paths.states[:, i]
    if method == "DS":
        u = mlp_graph(unet, Tensor(scaler(xi)), uparams, ustats)
        res = target - u
    else:
        u, v = _value_and_z(method, model, scaler, xi, unet, uparams, vnet, vparams, ustats, vstats)
        fdt = driver_eval(drv, i * dt, xi, u, v) * dt
        res = _residual(target, u, fdt, _dot_last(v, paths.dw[:, i]))
    return (res * res).mean()


def _params_or_const(net, params):
    if net is None:
        return None
    return params if params is not None else [Tensor(p) for p in net.params()]


def dbdp_step_loss(unet: MlpNet, vnet: MlpNet | None, nets: StepNets, paths: PathBatch,
                   model: HestonParams, drv: Driver, i: int, method: str = "DBDP1",
                   uparams=None, vparams=None) -> Tensor:
    """One-step regression loss; ``vnet`` is ignored for DBDP2 (V from autodiff)."""
    if method not in ("DBDP1", "DBDP2"):
        raise ValueError(f"dbdp_step_loss handles DBDP1/DBDP2, got {method}")
    target = frozen_target(method, model, drv, nets, paths, i)
    if method == "DBDP2":
        vnet = None
    return _step_loss(method, model, drv, nets.scaler, paths, i, target, unet,
                      _params_or_const(unet, uparams), vnet, _params_or_const(vnet, vparams))


def ds_step_loss(unet: MlpNet, nets: StepNets, paths: PathBatch, model: HestonParams,
                 drv: Driver, i: int, uparams=None) -> Tensor:
    target = frozen_target("DS", model, drv, nets, paths, i)
    return _step_loss("DS", model, drv, nets.scaler, paths, i, target, unet,
                      _params_or_const(unet, uparams))


def mdbdp_step_loss(unet: MlpNet, vnet: MlpNet, nets: StepNets, paths: PathBatch,
                    model: HestonParams, drv: Driver, i: int, uparams=None, vparams=None) -> Tensor:
    target = frozen_target("MDBDP", model, drv, nets, paths, i)
    return _step_loss("MDBDP", model, drv, nets.scaler, paths, i, target, unet,
                      _params_or_const(unet, uparams), vnet, _params_or_const(vnet, vparams))


# ---------------------------------------------------------------- training

def backward_train(cfg: SolverConfig, model: HestonParams, drv: Driver | None = None,
                   return_nets: bool = False):
    """Train steps ``N-1 .. 0``; each step warm-starts from the one after it."""
    if not cfg.is_backward:
        raise ValueError(f"backward_train needs a backward method, got {cfg.method}")
    drv = drv or default_driver(model)
    method = cfg.method
    t_start = time.perf_counter()
    streams = RunStreams(cfg.seed)
    n = cfg.n_steps
    dim = model.dim
    has_v = method in ("DBDP1", "MDBDP")

    pilot = sample_paths(model, n, cfg.val_size, streams.pilot)
    nets = StepNets(n, Scaler.fit(pilot))
    val = sample_paths(model, n, cfg.val_size, streams.val)
    stream = PathStream(model, n, cfg.batch, streams.train)
    curve: list[tuple[int, float]] = []
    total = 0

    bn = cfg.batch_norm
    unet = init_net(dim, 1, cfg.hidden, streams.init_seed, cfg.activation, batch_norm=bn)
    vnet = (init_net(dim, dim, cfg.hidden, streams.init_seed + 1, cfg.activation, batch_norm=bn)
            if has_v else None)

    def fail(msg: str, step: int):
        price = price_at_initial(model, nets) if 0 in nets.u else float("nan")
        run = SolverRun(cfg, price, curve or [(total, float("nan"))],
                        time.perf_counter() - t_start, cfg.seed, "diverged", msg)
        raise SolverDivergence(msg, run, step)

    for i in reversed(range(n)):
        if i < n - 1:
            unet, vnet = unet.copy(), (vnet.copy() if has_v else None)
        params = unet.params() + (vnet.params() if has_v else [])
        n_u = len(unet.params())
        opt = AdamState.for_params(params, lr=cfg.lr)
        val_target = frozen_target(method, model, drv, nets, val, i)

        def val_loss() -> float:
            with ad.no_grad():
                return float(_step_loss(method, model, drv, nets.scaler, val, i, val_target,
                                        unet, [Tensor(p) for p in unet.params()], vnet,
                                        [Tensor(p) for p in vnet.params()] if has_v else None).data)

        iters = cfg.iters_first if i == n - 1 else cfg.iters_rest
        for it in range(iters):
            k = it % CHUNK_ITERS
            if k == 0:
                chunk = stream.chunk()
                chunk_target = frozen_target(method, model, drv, nets, chunk, i)
            paths = slice_batch(chunk, k, cfg.batch)
            target = chunk_target[k * cfg.batch:(k + 1) * cfg.batch]
            tensors = [Tensor(p, requires_grad=True) for p in params]
            ustats, vstats = ([], []) if bn else (None, None)
            loss = _step_loss(method, model, drv, nets.scaler, paths, i, target, unet,
                              tensors[:n_u], vnet, tensors[n_u:] if has_v else None,
                              ustats, vstats)
            if not np.isfinite(loss.data):
                fail(f"non-finite training loss at step {i}, iteration {it}", i)
            grads = [g.data for g in ad.grad(loss, tensors)]
            adam_step(opt, params, grads, lr=decayed_lr(cfg, it, iters))
            if bn:
                update_running_stats(unet, ustats)
                if has_v:
                    update_running_stats(vnet, vstats)
            total += 1
            if (it + 1) % cfg.eval_every == 0 and it + 1 < iters:
                curve.append((total, val_loss()))
        vl = val_loss()
        curve.append((total, vl))
        if not np.isfinite(vl):
            fail(f"validation loss became non-finite at step {i}", i)
        nets.u[i] = unet
        if has_v:
            nets.v[i] = vnet

    price = price_at_initial(model, nets)
    if not np.isfinite(price):
        fail("non-finite price at time zero", 0)
    run = SolverRun(cfg, price, curve, time.perf_counter() - t_start, cfg.seed)
    return (run, nets) if return_nets else run


def price_at_initial(model: HestonParams, nets: StepNets) -> float:
    """``U_0`` at the initial state.

    A batch-normalised ``U_0`` was trained on a batch of identical inputs, where
    every layer normalises to its shift; it is evaluated the same way rather
    than through running statistics that never saw any spread.
    """
    x0 = model.initial_state()[None, :]
    net = nets.u[0]
    if net.batch_norm:
        xs = nets.scaler(np.repeat(x0, 2, axis=0))
        with ad.no_grad():
            out = mlp_graph(net, Tensor(xs), [Tensor(p) for p in net.params()])
        return float(out.data[0, 0])
    return float(apply(net, nets.scaler(x0))[0, 0])
