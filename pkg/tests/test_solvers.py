import math

import numpy as np
import pytest

from deepbsde import autodiff as ad
from deepbsde.autodiff import Tensor
from deepbsde.models import Driver, HestonParams, PathBatch, payoff, rate_driver, simulate_paths
from deepbsde.nn import MlpNet, apply, init_net, input_gradient
from deepbsde.oracle import bs_closed_form
from deepbsde.solvers import (SolverConfig, SolverDivergence, StepNets, config_from_mapping,
                              config_to_mapping, dbdp_step_loss, dbsde_loss, ds_step_loss,
                              mdbdp_step_loss, price_at_initial, solve, terminal_values)
from deepbsde.solvers.backward import frozen_target
from deepbsde.solvers.common import Scaler

from conftest import central_diff, rel_err

ZERO = Driver(lambda t, x, y, z: y * 0.0, "zero", uses_z=False)
FLAT = HestonParams(d=2, r=0.0, nu0=0.0, theta=0.0, xi=0.0)


def _const_net(n_in, n_out, c, stack=None):
    net = init_net(n_in, n_out, [3], seed=0, stack=stack)
    net.weights = [np.zeros_like(w) for w in net.weights]
    net.biases[-1][...] = c
    return net


def _linear_net(w, b):
    w = np.asarray(w, dtype=float).reshape(-1, 1)
    return MlpNet(w.shape[0], 1, [], "linear", [w], [np.array([float(b)])])


def _paths(p, n, batch, seed=0, zero_dw=False):
    paths = simulate_paths(p, n, batch, seed)
    if zero_dw:
        paths = PathBatch(paths.states, np.zeros_like(paths.dw), paths.dt)
    return paths


def _small(p, n, batch=6, seed=1):
    return _paths(p, n, batch, seed)


# ---------------------------------------------------------------- DBSDE loss

def test_dbsde_loss_deterministic_terminal_match():
    paths = _paths(FLAT, 1, 4)
    g0 = payoff(FLAT, FLAT.initial_state()[None])[0, 0]
    znet = _const_net(4, 4, 0.0, stack=1)
    assert float(dbsde_loss(np.array([g0]), znet, paths, FLAT, ZERO).data) == 0.0
    assert float(dbsde_loss(np.array([g0 + 1.0]), znet, paths, FLAT, ZERO).data) == 1.0


def test_dbsde_loss_two_step_hand_recursion():
    p = HestonParams(d=1)
    paths = _paths(p, 2, 1, seed=4)
    znet = init_net(2, 2, [4], seed=5, stack=2)
    u0 = 12.5
    dt, r = paths.dt, p.r
    z = [apply(MlpNet(2, 2, [4], "relu", [w[i] for w in znet.weights], [b[i, 0] for b in znet.biases]),
               paths.states[:, i]) for i in range(2)]
    y1 = u0 + r * u0 * dt + float(z[0][0] @ paths.dw[0, 0])
    y2 = y1 + r * y1 * dt + float(z[1][0] @ paths.dw[0, 1])
    g = payoff(p, paths.states[:, -1])[0, 0]
    got = float(dbsde_loss(np.array([u0]), znet, paths, p, rate_driver(r)).data)
    assert got == pytest.approx((y2 - g) ** 2, rel=1e-13)
    assert terminal_values(np.array([u0]), znet, paths, p, rate_driver(r)).data[0, 0] == pytest.approx(y2)


def test_dbsde_loss_needs_one_net_per_step():
    with pytest.raises(ValueError):
        dbsde_loss(np.array([1.0]), _const_net(4, 4, 0.0, stack=2), _paths(FLAT, 3, 2), FLAT, ZERO)


# ---------------------------------------------------------------- DBDP

def test_dbdp_exact_transport_has_zero_loss():
    p = HestonParams(d=2, nu0=0.0, theta=0.0, xi=0.0)
    paths = _paths(p, 2, 5, zero_dw=True)
    dt = paths.dt
    w1 = np.array([0.3, -0.2, 0.7, 0.1])
    nets = StepNets(2, Scaler.identity(4), u={1: _linear_net(w1, 2.0)})
    # U_0 = U_1 after one deterministic Euler step x -> x * (1 + r dt) on prices
    u0 = _linear_net(w1 * np.array([1 + p.r * dt] * 2 + [1.0] * 2), 2.0)
    v0 = _const_net(4, 4, 0.7)
    assert float(dbdp_step_loss(u0, v0, nets, paths, p, ZERO, 0).data) == pytest.approx(0.0, abs=1e-24)


def test_dbdp_zero_nets_at_last_step_give_second_moment_of_payoff():
    p = HestonParams(d=2)
    paths = _small(p, 3, 16)
    nets = StepNets(3, Scaler.identity(4))
    loss = dbdp_step_loss(_const_net(4, 1, 0.0), _const_net(4, 4, 0.0), nets, paths, p, ZERO, 2)
    g = payoff(p, paths.states[:, -1])
    assert float(loss.data) == pytest.approx(float((g ** 2).mean()), rel=1e-14)


def test_dbdp_hand_residual():
    p = HestonParams(d=1)
    paths = _small(p, 3, 1, seed=7)
    unext = init_net(2, 1, [3], seed=1)
    nets = StepNets(3, Scaler.identity(2), u={2: unext})
    u, v = init_net(2, 1, [3], seed=2), init_net(2, 2, [3], seed=3)
    i, dt = 1, paths.dt
    x, xn, dw = paths.states[0, i], paths.states[0, i + 1], paths.dw[0, i]
    ui = apply(u, x[None])[0, 0]
    res = apply(unext, xn[None])[0, 0] - ui - p.r * ui * dt - apply(v, x[None])[0] @ dw
    got = float(dbdp_step_loss(u, v, nets, paths, p, rate_driver(p.r), i).data)
    assert got == pytest.approx(res ** 2, rel=1e-12)


def test_dbdp2_uses_autodiff_gradient_for_z():
    p = HestonParams(d=1)
    paths = _small(p, 2, 1, seed=8)
    nets = StepNets(2, Scaler.identity(2))
    u = init_net(2, 1, [4], seed=4, activation="tanh")
    i, dt = 1, paths.dt
    x, dw = paths.states[0, i], paths.dw[0, i]
    s, nu = x
    gs, gv = input_gradient(u, x[None])[0]
    sq = math.sqrt(max(nu, 0.0))
    z = np.array([s * sq * gs + p.xi * p.rho * sq * gv, p.xi * math.sqrt(1 - p.rho ** 2) * sq * gv])
    ui = apply(u, x[None])[0, 0]
    res = payoff(p, paths.states[:, -1])[0, 0] - ui - p.r * ui * dt - z @ dw
    got = float(dbdp_step_loss(u, None, nets, paths, p, rate_driver(p.r), i, method="DBDP2").data)
    assert got == pytest.approx(res ** 2, rel=1e-12)


# ---------------------------------------------------------------- Deep Splitting

def test_ds_without_driver_is_plain_regression():
    p = HestonParams(d=2)
    paths = _small(p, 3, 10)
    unext = init_net(4, 1, [5], seed=1)
    nets = StepNets(3, Scaler.identity(4), u={2: unext})
    u = init_net(4, 1, [5], seed=2)
    want = np.mean((apply(unext, paths.states[:, 2]) - apply(u, paths.states[:, 1])) ** 2)
    assert float(ds_step_loss(u, nets, paths, p, ZERO, 1).data) == pytest.approx(want, rel=1e-13)


def test_ds_rate_driver_uses_next_value():
    p = HestonParams(d=1)
    paths = _small(p, 3, 1, seed=9)
    unext = init_net(2, 1, [3], seed=5)
    nets = StepNets(3, Scaler.identity(2), u={2: unext})
    u = init_net(2, 1, [3], seed=6)
    un = apply(unext, paths.states[:, 2])[0, 0]
    res = un - apply(u, paths.states[:, 1])[0, 0] - p.r * un * paths.dt
    assert float(ds_step_loss(u, nets, paths, p, rate_driver(p.r), 1).data) == pytest.approx(res ** 2)


def test_ds_constant_networks():
    p = HestonParams(d=2)
    paths = _small(p, 4, 8)
    c = 3.5
    nets = StepNets(4, Scaler.identity(4), u={2: _const_net(4, 1, c)})
    loss = ds_step_loss(_const_net(4, 1, c), nets, paths, p, rate_driver(p.r), 1)
    assert float(loss.data) == pytest.approx((p.r * c * paths.dt) ** 2, rel=1e-12)


# ---------------------------------------------------------------- MDBDP

def test_mdbdp_matches_dbdp_bit_for_bit_at_last_step():
    p = HestonParams(d=2)
    paths = _small(p, 4, 8)
    nets = StepNets(4, Scaler.fit(paths))
    u, v = init_net(4, 1, [6], seed=1), init_net(4, 4, [6], seed=2)
    a = mdbdp_step_loss(u, v, nets, paths, p, rate_driver(p.r), 3).data
    b = dbdp_step_loss(u, v, nets, paths, p, rate_driver(p.r), 3).data
    assert a.tobytes() == b.tobytes()


def test_mdbdp_collapses_without_driver_and_gradients():
    p = HestonParams(d=2)
    paths = _small(p, 4, 8)
    zero_v = _const_net(4, 4, 0.0)
    nets = StepNets(4, Scaler.identity(4), u={k: init_net(4, 1, [3], seed=k) for k in (2, 3)},
                    v={k: zero_v for k in (2, 3)})
    u = init_net(4, 1, [3], seed=9)
    want = np.mean((payoff(p, paths.states[:, -1]) - apply(u, paths.states[:, 1])) ** 2)
    got = float(mdbdp_step_loss(u, zero_v, nets, paths, p, ZERO, 1).data)
    assert got == pytest.approx(want, rel=1e-13)


def test_mdbdp_three_step_hand_residual():
    p = HestonParams(d=1)
    paths = _small(p, 3, 1, seed=11)
    dt, r = paths.dt, p.r
    nets = StepNets(3, Scaler.identity(2), u={k: init_net(2, 1, [3], seed=k) for k in (1, 2)},
                    v={k: init_net(2, 2, [3], seed=10 + k) for k in (1, 2)})
    u, v = init_net(2, 1, [3], seed=20), init_net(2, 2, [3], seed=21)
    x = paths.states[0]
    res = payoff(p, paths.states[:, -1])[0, 0]
    for j in (1, 2):
        uj = apply(nets.u[j], x[j][None])[0, 0]
        res -= r * uj * dt + apply(nets.v[j], x[j][None])[0] @ paths.dw[0, j]
    u0 = apply(u, x[0][None])[0, 0]
    res -= r * u0 * dt + apply(v, x[0][None])[0] @ paths.dw[0, 0] + u0
    got = float(mdbdp_step_loss(u, v, nets, paths, p, rate_driver(r), 0).data)
    assert got == pytest.approx(res ** 2, rel=1e-11)


# ---------------------------------------------------------------- shared properties

def test_step_losses_are_nonnegative():
    p = HestonParams(d=2)
    paths = _small(p, 3, 8)
    nets = StepNets(3, Scaler.fit(paths), u={2: init_net(4, 1, [4], seed=3)},
                    v={2: init_net(4, 4, [4], seed=4)})
    u, v = init_net(4, 1, [4], seed=5), init_net(4, 4, [4], seed=6)
    drv = rate_driver(p.r)
    losses = [dbdp_step_loss(u, v, nets, paths, p, drv, 1),
              dbdp_step_loss(u, None, nets, paths, p, drv, 1, method="DBDP2"),
              ds_step_loss(u, nets, paths, p, drv, 1),
              mdbdp_step_loss(u, v, nets, paths, p, drv, 1)]
    assert all(float(l.data) >= 0 for l in losses)


def test_dbdp2_and_ds_agree_without_noise_or_driver():
    paths = _paths(FLAT, 3, 6)
    nets = StepNets(3, Scaler.identity(4))
    u = init_net(4, 1, [5], seed=1)
    a = dbdp_step_loss(u, None, nets, paths, FLAT, ZERO, 2, method="DBDP2").data
    b = ds_step_loss(u, nets, paths, FLAT, ZERO, 2).data
    assert float(a) == pytest.approx(float(b), rel=1e-14)


def _loss_grad_check(method, activation):
    p = HestonParams(d=2)
    paths = _small(p, 3, 8, seed=3)
    drv = Driver(lambda t, x, y, z: y * 0.05 + (z * z).sum(axis=-1, keepdims=True) * 0.01, "zdep")
    nets = StepNets(3, Scaler.fit(paths), u={2: init_net(4, 1, [8, 8], seed=1, activation=activation)},
                    v={2: init_net(4, 4, [8, 8], seed=2, activation=activation)})
    u = init_net(4, 1, [8, 8], seed=3, activation=activation)
    v = init_net(4, 4, [8, 8], seed=4, activation=activation)
    i = 1

    def loss(up, vp):
        if method == "DS":
            return ds_step_loss(u, nets, paths, p, drv, i, uparams=up)
        if method == "MDBDP":
            return mdbdp_step_loss(u, v, nets, paths, p, drv, i, uparams=up, vparams=vp)
        return dbdp_step_loss(u, v, nets, paths, p, drv, i, method=method, uparams=up, vparams=vp)

    params = u.params() + (v.params() if method in ("DBDP1", "MDBDP") else [])
    nu = len(u.params())
    ts = [Tensor(a, requires_grad=True) for a in params]
    got = ad.grad(loss(ts[:nu], ts[nu:] or None), ts)
    f = lambda: float(loss([Tensor(a) for a in params[:nu]], [Tensor(a) for a in params[nu:]] or None).data)  # noqa: E731
    for g, w in zip(got, central_diff(f, params)):
        assert rel_err(g.data, w) < 1e-4


@pytest.mark.parametrize("method", ["DBDP1", "DBDP2", "DS", "MDBDP"])
def test_step_loss_parameter_gradients(method):
    _loss_grad_check(method, "tanh")


def test_value_gradient_matches_finite_differences():
    p = HestonParams(d=2)
    paths = _small(p, 3, 8, seed=3)
    nets = StepNets(3, Scaler.fit(paths), u={1: init_net(4, 1, [8, 8], seed=1, activation="tanh")})
    x = paths.states[:, 1].copy()
    got = nets.value_grad(p, 1, x)
    fd = central_diff(lambda: float(nets.value(p, 1, x).sum()), [x])[0]
    assert rel_err(got, fd) < 1e-6


def test_ds_target_with_z_driver_uses_frozen_gradient():
    p = HestonParams(d=1)
    paths = _small(p, 3, 2, seed=5)
    drv = Driver(lambda t, x, y, z: z[..., :1] * 1.0, "z0")
    nets = StepNets(3, Scaler.identity(2), u={2: init_net(2, 1, [4], seed=1, activation="tanh")})
    x, xn = paths.states[:, 1], paths.states[:, 2]
    g = input_gradient(nets.u[2], xn)
    z0 = x[:, 0] * np.sqrt(x[:, 1]) * g[:, 0] + p.xi * p.rho * np.sqrt(x[:, 1]) * g[:, 1]
    want = apply(nets.u[2], xn)[:, 0] - z0 * paths.dt
    np.testing.assert_allclose(frozen_target("DS", p, drv, nets, paths, 1)[:, 0], want, rtol=1e-12)


# ---------------------------------------------------------------- training

TINY = dict(n_steps=3, batch=16, val_size=64, iters_forward=30, iters_first=20, iters_rest=10,
            hidden=[8, 8], eval_every=10)


@pytest.mark.parametrize("method", ["DBSDE", "DBDP1", "DBDP2", "DS", "MDBDP"])
def test_training_is_deterministic(method):
    p = HestonParams(d=2)
    cfg = SolverConfig(method=method, seed=5, **TINY)
    a, b = solve(cfg, p), solve(cfg, p)
    assert math.isfinite(a.price)
    assert a.price == b.price and a.loss_curve == b.loss_curve
    assert a.to_csv() == b.to_csv()


def test_backward_curve_covers_every_step():
    run = solve(SolverConfig(method="DBDP1", seed=1, **TINY), HestonParams(d=2))
    assert run.loss_curve[-1][0] == 20 + 2 * 10
    assert len(run.loss_curve) >= 3


def test_batch_norm_training_runs_and_is_deterministic():
    cfg = SolverConfig(method="DBDP1", seed=2, batch_norm=True, **TINY)
    a, b = solve(cfg, HestonParams(d=2)), solve(cfg, HestonParams(d=2))
    assert math.isfinite(a.price) and a.price == b.price


def test_price_at_initial_with_constant_network():
    p = HestonParams(d=2)
    nets = StepNets(2, Scaler.identity(4), u={0: _const_net(4, 1, 42.0)})
    assert price_at_initial(p, nets) == 42.0
    bn = init_net(4, 1, [3], seed=0, batch_norm=True)
    bn.biases[-1][...] = 7.0
    assert price_at_initial(p, StepNets(2, Scaler.identity(4), u={0: bn})) == pytest.approx(7.0)


def test_dbsde_price_is_trained_scalar():
    run = solve(SolverConfig(method="DBSDE", seed=3, **TINY), HestonParams(d=2))
    assert run.price == float(np.float64(run.price))
    assert run.csv_row()["price"] == repr(run.price)


def test_dbsde_matches_black_scholes_in_degenerate_model():
    p = HestonParams(d=1, xi=0.0, nu0=0.1, theta=0.1)
    cfg = SolverConfig(method="DBSDE", n_steps=20, iters_forward=600, seed=0, eval_every=100)
    bs = bs_closed_form(100, p.strike, p.r, math.sqrt(0.1), 1.0)
    assert abs(solve(cfg, p).price - bs) / bs < 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_validation_loss_trend_is_nonincreasing(seed):
    # means over consecutive 500-iteration windows
    cfg = SolverConfig(method="DBSDE", n_steps=5, iters_forward=2000, seed=seed, lr_decay=True,
                       hidden=[16, 16], eval_every=100)
    curve = np.array([loss for _, loss in solve(cfg, HestonParams(d=2)).loss_curve])
    windows = curve.reshape(-1, 5).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_the_failing_step():
    bad = Driver(lambda t, x, y, z: y * np.nan, "nan")
    with pytest.raises(SolverDivergence) as exc:
        solve(SolverConfig(method="DBDP1", seed=0, **TINY), HestonParams(d=2), bad)
    assert exc.value.step == 2 and exc.value.run.status == "diverged"
    with pytest.raises(SolverDivergence, match="iteration 0"):
        solve(SolverConfig(method="DBSDE", seed=0, **TINY), HestonParams(d=2), bad)


# ---------------------------------------------------------------- config

def test_config_defaults():
    cfg = SolverConfig()
    assert (cfg.n_steps, cfg.batch, cfg.val_size, cfg.lr) == (40, 64, 2048, 0.01)
    assert (cfg.iters_forward, cfg.iters_first, cfg.iters_rest) == (8000, 16000, 3000)
    assert cfg.hidden == [128, 128] and not cfg.batch_norm


@pytest.mark.parametrize("bad", [{"iters_forward": 0}, {"batch": -1}, {"method": "SGD"}, {"lr": 0.0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_config_mapping_round_trip():
    cfg = SolverConfig(method="ds", hidden=[4, 5], lr_decay=True, batch_norm=True, seed=9)
    assert config_from_mapping(config_to_mapping(cfg)) == cfg
    with pytest.raises(KeyError):
        config_from_mapping({"momentum": "0.9"})
