"""Feedforward networks, the Adam optimizer and a flat checkpoint container."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ShapeError(ValueError):
    """Raised when an array does not have the dimensions an operation expects."""


@dataclass
class MlpNet:
    """Dense network ``input_dim -> hidden... -> output_dim``.

    With ``stack=n`` the net holds ``n`` independent copies of the same
    architecture, stored along a leading axis (weights ``[n, fan_in, fan_out]``,
    biases ``[n, 1, fan_out]``) and evaluated on inputs ``[n, batch, input_dim]``
    with one batched matmul per layer.

    With ``batch_norm`` every matmul (the output layer included) is followed by
    batch normalisation; ``biases`` then play the role of the normalisation
    shift and ``gammas`` hold its scale. Training passes normalise with batch
    statistics, :func:`apply` with the running averages.
    """

    input_dim: int
    output_dim: int
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    activation: str = "relu"
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    stack: int | None = None
    batch_norm: bool = False
    gammas: list[np.ndarray] = field(default_factory=list)
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)
    bn_momentum: float = 0.99
    bn_eps: float = 1e-6

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def group(self) -> int:
        return 3 if self.batch_norm else 2

    def params(self) -> list[np.ndarray]:
        """Trainable arrays in the fixed order ``W0, b0, [g0,] W1, b1, [g1,] ...``."""
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [w, b]
            if self.batch_norm:
                out.append(self.gammas[k])
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        g = self.group
        self.weights = list(params[0::g])
        self.biases = list(params[1::g])
        if self.batch_norm:
            self.gammas = list(params[2::g])

    def copy(self) -> "MlpNet":
        cp = lambda xs: [x.copy() for x in xs]  # noqa: E731
        return MlpNet(self.input_dim, self.output_dim, list(self.hidden), self.activation,
                      cp(self.weights), cp(self.biases), self.stack, self.batch_norm,
                      cp(self.gammas), cp(self.running_mean), cp(self.running_var),
                      self.bn_momentum, self.bn_eps)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class Gradients:
    params: list[np.ndarray]
    input: np.ndarray | None = None


def param_count(input_dim: int, output_dim: int, hidden: list[int]) -> int:
    dims = [input_dim, *hidden, output_dim]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def init_net(input_dim: int, output_dim: int, hidden=(128, 128), seed: int = 0,
             activation: str = "relu", stack: int | None = None,
             batch_norm: bool = False) -> MlpNet:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    hidden = list(hidden)
    if input_dim <= 0 or output_dim <= 0 or any(h <= 0 for h in hidden):
        raise ValueError(f"layer sizes must be positive, got {[input_dim, *hidden, output_dim]}")
    if stack is not None and stack <= 0:
        raise ValueError("stack must be positive")
    if activation not in ad.ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, output_dim]
    lead = () if stack is None else (stack,)
    net = MlpNet(input_dim, output_dim, hidden, activation, stack=stack, batch_norm=batch_norm)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        net.weights.append(rng.uniform(-limit, limit, size=lead + (fan_in, fan_out)))
        vec = lead + (1, fan_out) if stack else (fan_out,)
        net.biases.append(np.zeros(vec))
        if batch_norm:
            net.gammas.append(np.ones(vec))
            net.running_mean.append(np.zeros(vec))
            net.running_var.append(np.ones(vec))
    return net


def _check_input(net: MlpNet, x: np.ndarray) -> None:
    want_nd = 2 if net.stack is None else 3
    if x.ndim != want_nd or x.shape[-1] != net.input_dim or (
            net.stack is not None and x.shape[0] != net.stack):
        lead = "[batch, " if net.stack is None else f"[{net.stack}, batch, "
        raise ShapeError(f"expected input {lead}{net.input_dim}], got {list(x.shape)}")


def _act_np(name: str, h: np.ndarray) -> np.ndarray:
    if name == "relu":
        return h * (h > 0)
    if name == "tanh":
        return np.tanh(h)
    return h


def apply(net: MlpNet, x: np.ndarray) -> np.ndarray:
    """Unchecked numpy forward pass in inference mode (hot path for frozen networks)."""
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w
        if net.batch_norm:
            h = (h - net.running_mean[k]) * (net.gammas[k] / np.sqrt(net.running_var[k] + net.bn_eps))
        h = h + b
        if k < last:
            h = _act_np(net.activation, h)
    return h


def mlp_forward(net: MlpNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_input(net, x)
    if not np.isfinite(x).all():
        raise ValueError("network input contains non-finite values")
    return apply(net, x)


def mlp_graph(net: MlpNet, x: Tensor, params: list[Tensor], batch_stats: list | None = None,
              freeze_stats: bool = False) -> Tensor:
    """Forward pass recorded on the autodiff tape (training mode).

    Batch-norm statistics of the pass are appended to ``batch_stats`` when
    given. With ``freeze_stats`` they are treated as constants, which makes
    every output row a function of its own input row only.
    """
    act = ad.ACTIVATIONS[net.activation]
    g = net.group
    h = x
    n_layers = len(params) // g
    for k in range(n_layers):
        h = h @ params[g * k]
        if net.batch_norm:
            mu = h.mean(axis=-2, keepdims=True)
            if freeze_stats:
                mu = ad.detach(mu)
            c = h - mu
            var = (c * c).mean(axis=-2, keepdims=True)
            if batch_stats is not None:
                batch_stats.append((mu.data, var.data))
            if freeze_stats:
                var = ad.detach(var)
            h = c * ad.power(var + net.bn_eps, -0.5) * params[g * k + 2]
        h = h + params[g * k + 1]
        if k < n_layers - 1:
            h = act(h)
    return h


def update_running_stats(net: MlpNet, batch_stats: list) -> None:
    m = net.bn_momentum
    for k, (mu, var) in enumerate(batch_stats):
        net.running_mean[k] *= m
        net.running_mean[k] += (1.0 - m) * mu.reshape(net.running_mean[k].shape)
        net.running_var[k] *= m
        net.running_var[k] += (1.0 - m) * var.reshape(net.running_var[k].shape)


def param_tensors(net: MlpNet) -> list[Tensor]:
    return [Tensor(p, requires_grad=True) for p in net.params()]


def mlp_backward(net: MlpNet, x, upstream, want_input_grad: bool = False) -> Gradients:
    """Gradients of ``sum(upstream * net(x))`` w.r.t. parameters (and input)."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_input(net, x)
    if not np.isfinite(upstream).all():
        raise ValueError("upstream gradient contains non-finite values")
    params = param_tensors(net)
    xt = Tensor(x, requires_grad=want_input_grad)
    out = mlp_graph(net, xt, params)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream shape {list(upstream.shape)} != output shape {list(out.shape)}")
    wrt = params + ([xt] if want_input_grad else [])
    gs = [g.data for g in ad.grad(out, wrt, grad_output=upstream)]
    if want_input_grad:
        return Gradients(gs[:-1], gs[-1])
    return Gradients(gs)


def input_gradient(net: MlpNet, x: np.ndarray) -> np.ndarray:
    """``d net(x) / dx`` in inference mode for a scalar-output net, ``[batch, input_dim]``."""
    h = np.asarray(x, dtype=np.float64)
    masks = []
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w
        if net.batch_norm:
            h = (h - net.running_mean[k]) * (net.gammas[k] / np.sqrt(net.running_var[k] + net.bn_eps))
        h = h + b
        if k < last:
            if net.activation == "relu":
                masks.append(h > 0)
                h = h * masks[-1]
            elif net.activation == "tanh":
                h = np.tanh(h)
                masks.append(1.0 - h * h)
            else:
                masks.append(None)
    g = np.ones(h.shape)
    for k in range(last, -1, -1):
        if net.batch_norm:
            g = g * (net.gammas[k] / np.sqrt(net.running_var[k] + net.bn_eps))
        g = g @ np.swapaxes(net.weights[k], -1, -2)
        if k > 0 and masks[k - 1] is not None:
            g = g * masks[k - 1]
    return g


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 0.01, **kw) -> "AdamState":
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)


def adam_step(state: AdamState, params: list[np.ndarray], grads: "list[np.ndarray] | Gradients",
              lr: float | None = None) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if isinstance(grads, Gradients):
        grads = grads.params
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and optimizer moments differ in length")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        tmp = g * (1.0 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        if lr != 0.0:
            # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / math.sqrt(c2)
            tmp += state.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / c1
            p -= tmp


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DBBCKPT1"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: header per entry, then row-major values."""
    buf = bytearray(_MAGIC)
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        buf += struct.pack("<H", len(key)) + key
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    pos = 8
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out


_ACT_CODES = {name: k for k, name in enumerate(ad.ACTIVATIONS)}


def save_net(net: MlpNet, path) -> None:
    arrays = {"meta.dims": np.array(net.dims, dtype=float),
              "meta.flags": np.array([net.stack or 0, float(net.batch_norm),
                                      _ACT_CODES[net.activation], net.bn_momentum, net.bn_eps])}
    for k, p in enumerate(net.params()):
        arrays[f"param.{k}"] = p
    for k, (m, v) in enumerate(zip(net.running_mean, net.running_var)):
        arrays[f"running_mean.{k}"] = m
        arrays[f"running_var.{k}"] = v
    save_arrays(path, arrays)


def load_net(path) -> MlpNet:
    arrays = load_arrays(path)
    dims = [int(v) for v in arrays["meta.dims"]]
    stack, bn, act, momentum, eps = arrays["meta.flags"]
    activation = list(ad.ACTIVATIONS)[int(act)]
    net = MlpNet(dims[0], dims[-1], dims[1:-1], activation, stack=int(stack) or None,
                 batch_norm=bool(bn), bn_momentum=float(momentum), bn_eps=float(eps))
    n_layers = len(dims) - 1
    net.set_params([arrays[f"param.{k}"] for k in range(net.group * n_layers)])
    if net.batch_norm:
        net.running_mean = [arrays[f"running_mean.{k}"] for k in range(n_layers)]
        net.running_var = [arrays[f"running_var.{k}"] for k in range(n_layers)]
    return net
