"""Minimal reverse-mode autodiff over numpy arrays, plus the small-network
machinery built on it: dense / conditional-batch-norm layers, AdamW, and a
binary parameter format.

Everything is float64. The tape records closures only when a parent requires
gradients, so eval-mode forwards cost nothing extra.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np


def softplus_array(x: np.ndarray) -> np.ndarray:
    """Stable softplus, noticeably faster than np.logaddexp(0, x)."""
    out = np.log1p(np.exp(-np.abs(x)))
    out += np.maximum(x, 0.0)
    return out


def _sum_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    # -- graph plumbing ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(np.broadcast_to(g, self.data.shape), dtype=np.float64)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None):
        if self._bwd is None and not self._parents:
            raise ValueError("backward called on a tensor with no recorded graph")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward needs an explicit seed for non-scalar outputs")
            seed = np.ones_like(self.data)
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(seed)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- construction helper -----------------------------------------------
    @staticmethod
    def _op(data, parents, bwd):
        track = any(p.requires_grad or p._parents for p in parents)
        return Tensor(data, _parents=tuple(parents) if track else (),
                      _bwd=bwd if track else None)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accum(_sum_to(g, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_sum_to(g, other.data.shape))
        return Tensor._op(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)
        return Tensor._op(-self.data, (self,), bwd)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accum(_sum_to(g * other.data, self.data.shape))
            if other.requires_grad or other._parents:
                other._accum(_sum_to(g * self.data, other.data.shape))
        return Tensor._op(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return Tensor(other) * self ** -1.0

    def __pow__(self, k):
        assert np.isscalar(k), "only scalar exponents"
        out_data = self.data ** k

        def bwd(g):
            self._accum(g * k * self.data ** (k - 1))
        return Tensor._op(out_data, (self,), bwd)

    def __matmul__(self, other):
        """(..., m, n) @ (n, p); the right operand must be a 2-D matrix."""
        other = other if isinstance(other, Tensor) else Tensor(other)
        if other.ndim != 2:
            raise ValueError("matmul right operand must be 2-D")
        out_data = self.data @ other.data

        def bwd(g):
            if self.requires_grad or self._parents:
                self._accum(g @ other.data.T)
            if other.requires_grad or other._parents:
                a2 = self.data.reshape(-1, self.data.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                other._accum(a2.T @ g2)
        return Tensor._op(out_data, (self, other), bwd)

    # -- elementwise nonlinearities -------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            self._accum(g * out_data)
        return Tensor._op(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accum(g / self.data)
        return Tensor._op(np.log(self.data), (self,), bwd)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bwd(g):
            self._accum(g * 0.5 / out_data)
        return Tensor._op(out_data, (self,), bwd)

    def softplus(self):
        out_data = softplus_array(self.data)

        def bwd(g):
            self._accum(g / (1.0 + np.exp(-self.data)))
        return Tensor._op(out_data, (self,), bwd)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def bwd(g):
            self._accum(g * (self.data > 0))
        return Tensor._op(out_data, (self,), bwd)

    def abs(self):
        def bwd(g):
            self._accum(g * np.sign(self.data))
        return Tensor._op(np.abs(self.data), (self,), bwd)

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes only through the interior."""
        out_data = np.clip(self.data, lo, hi)
        inside = (self.data > lo) & (self.data < hi)

        def bwd(g):
            self._accum(g * inside)
        return Tensor._op(out_data, (self,), bwd)

    # -- reductions / shaping --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.data.shape).copy()
                            if np.ndim(g) else np.full_like(self.data, g))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.data.shape).copy())
        return Tensor._op(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int):
        """Max over one axis; gradient routes to the (first) argmax."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        out_data = np.squeeze(out_data, axis=axis)

        def bwd(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis=axis)
            self._accum(full)
        return Tensor._op(out_data, (self,), bwd)

    def reshape(self, *shape):
        def bwd(g):
            self._accum(g.reshape(self.data.shape))
        return Tensor._op(self.data.reshape(*shape), (self,), bwd)

    def transpose2d(self):
        if self.ndim != 2:
            raise ValueError("transpose2d needs a 2-D tensor")

        def bwd(g):
            self._accum(g.T)
        return Tensor._op(self.data.T, (self,), bwd)

    def take(self, idx: np.ndarray):
        """Gather rows (fancy index on axis 0); scatter-add on backward."""
        idx = np.asarray(idx)

        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)
        return Tensor._op(self.data[idx], (self,), bwd)

    def __getitem__(self, key):
        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accum(full)
        return Tensor._op(self.data[key], (self,), bwd)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])
    return Tensor._op(out_data, tuple(tensors), bwd)


def stack_rows(tensors: list[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix (row per tensor)."""
    out_data = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad or t._parents:
                t._accum(g[i])
    return Tensor._op(out_data, tuple(tensors), bwd)


def repeat_rows(t: Tensor, n: int) -> Tensor:
    """Repeat each row of a matrix n times (block layout)."""
    out_data = np.repeat(t.data, n, axis=0)

    def bwd(g):
        t._accum(g.reshape(t.data.shape[0], n, -1).sum(axis=1))
    return Tensor._op(out_data, (t,), bwd)


# ---------------------------------------------------------------------------
# layers

ACTIVATIONS = ("linear", "softplus", "relu")


def apply_activation(x: Tensor, name: str) -> Tensor:
    if name == "linear":
        return x
    if name == "softplus":
        return x.softplus()
    if name == "relu":
        return x.relu()
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    weights: Tensor
    biases: Tensor
    kind: str = "dense"

    @property
    def dims(self):
        return self.weights.shape

    def params(self, prefix):
        return [(f"{prefix}.W", self.weights), (f"{prefix}.b", self.biases)]


@dataclass
class CondBatchNormLayer:
    """Batch norm whose per-feature scale/shift are linear maps of a condition."""

    scale_w: Tensor
    scale_b: Tensor
    shift_w: Tensor
    shift_b: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    kind: str = "cond_batchnorm"

    @property
    def dims(self):
        return self.scale_w.shape

    def params(self, prefix):
        return [(f"{prefix}.scale_w", self.scale_w), (f"{prefix}.scale_b", self.scale_b),
                (f"{prefix}.shift_w", self.shift_w), (f"{prefix}.shift_b", self.shift_b)]


@dataclass
class MlpParams:
    """Ordered layer bundle; the network definition the trainers move around."""

    layers: list
    activations: list[str]
    cond_dim: int | None = None
    input_latent: bool = False   # condition is also concatenated to the input

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ValueError("need one activation tag per layer")
        prev_out = None
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                d_in, d_out = layer.dims
                if prev_out is not None and d_in != prev_out:
                    raise ValueError(
                        f"layer {i}: input dim {d_in} does not chain with {prev_out}")
                prev_out = d_out
            else:  # cond_batchnorm keeps feature width
                if prev_out is not None and layer.dims[1] != prev_out:
                    raise ValueError(
                        f"layer {i}: norm width {layer.dims[1]} != {prev_out}")

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.params(f"layer{i}"))
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()


def make_mlp(dims: list[int], cond_dim: int | None = None,
             hidden_activation: str = "softplus", output_activation: str = "linear",
             conditional_norm: bool = False, seed: int = 0,
             zero_init: bool = False) -> MlpParams:
    """Dense stack d0 -> d1 -> ... -> dn, optionally with conditional batch
    norm after every hidden dense layer."""
    rng = np.random.default_rng(seed)
    layers, acts = [], []
    for i in range(len(dims) - 1):
        d_in, d_out = dims[i], dims[i + 1]
        last = i == len(dims) - 2
        scale = 0.0 if zero_init else np.sqrt(2.0 / d_in)
        w = Tensor(rng.normal(0.0, scale, size=(d_in, d_out)) if scale else
                   np.zeros((d_in, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True)
        layers.append(DenseLayer(w, b))
        if not last and conditional_norm:
            if cond_dim is None:
                raise ValueError("conditional_norm requires cond_dim")
            acts.append("linear")
            layers.append(CondBatchNormLayer(
                scale_w=Tensor(np.zeros((cond_dim, d_out)), requires_grad=True),
                scale_b=Tensor(np.ones(d_out), requires_grad=True),
                shift_w=Tensor(np.zeros((cond_dim, d_out)), requires_grad=True),
                shift_b=Tensor(np.zeros(d_out), requires_grad=True),
                running_mean=np.zeros(d_out), running_var=np.ones(d_out)))
            acts.append(hidden_activation)
        else:
            acts.append(output_activation if last else hidden_activation)
    return MlpParams(layers=layers, activations=acts, cond_dim=cond_dim)


def forward(params: MlpParams, x: Tensor, condition: Tensor | None = None,
            mode: str = "train", update_stats: bool = True) -> Tensor:
    """Run the network. Train mode normalizes with batch statistics (and
    updates running stats); eval mode uses the stored running statistics."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    for i, (layer, act) in enumerate(zip(params.layers, params.activations)):
        if layer.kind == "dense":
            if x.shape[-1] != layer.dims[0]:
                raise ValueError(
                    f"layer {i}: input width {x.shape[-1]} != expected {layer.dims[0]}")
            x = x @ layer.weights + layer.biases
        else:
            if condition is None:
                raise ValueError(f"layer {i}: conditional batch norm needs a condition")
            if condition.shape[-1] != layer.dims[0]:
                raise ValueError(
                    f"layer {i}: condition width {condition.shape[-1]} != "
                    f"expected {layer.dims[0]}")
            if mode == "train":
                mu = x.mean(axis=0, keepdims=True)
                centered = x - mu
                var = (centered * centered).mean(axis=0, keepdims=True)
                if update_stats:
                    m = layer.momentum
                    layer.running_mean = (m * layer.running_mean
                                          + (1 - m) * mu.data.reshape(-1))
                    layer.running_var = (m * layer.running_var
                                         + (1 - m) * var.data.reshape(-1))
                x_hat = centered * ((var + layer.eps) ** -0.5)
            else:
                x_hat = ((x - layer.running_mean)
                         * Tensor((layer.running_var + layer.eps) ** -0.5))
            gamma = condition @ layer.scale_w + layer.scale_b
            beta = condition @ layer.shift_w + layer.shift_b
            x = gamma * x_hat + beta
        x = apply_activation(x, act)
    return x


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: AdamWState, named_params: list[tuple[str, Tensor]]):
    """Decoupled-weight-decay Adam update, in place, deterministic."""
    state.step += 1
    t = state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p.data -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                              + state.weight_decay * p.data)


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"MLPW"
_KIND_CODE = {"dense": 0, "cond_batchnorm": 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}
_ACT_CODE = {name: i for i, name in enumerate(ACTIVATIONS)}


def save_mlp(params: MlpParams, path, manifest: dict | None = None):
    """Binary layer table + f64 buffers; JSON manifest sidecar."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(params.layers)))
        fh.write(struct.pack("<i", -1 if params.cond_dim is None else params.cond_dim))
        fh.write(struct.pack("<B", 1 if params.input_latent else 0))
        for layer, act in zip(params.layers, params.activations):
            d0, d1 = layer.dims
            fh.write(struct.pack("<BBII", _KIND_CODE[layer.kind], _ACT_CODE[act], d0, d1))
        for layer in params.layers:
            if layer.kind == "dense":
                bufs = [layer.weights.data, layer.biases.data]
            else:
                bufs = [layer.scale_w.data, layer.scale_b.data,
                        layer.shift_w.data, layer.shift_b.data,
                        layer.running_mean, layer.running_var]
            for b in bufs:
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if manifest is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def load_mlp(path) -> MlpParams:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not an MLPW file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported MLPW version {version}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        (cond_dim,) = struct.unpack("<i", fh.read(4))
        (input_latent,) = struct.unpack("<B", fh.read(1))
        table = [struct.unpack("<BBII", fh.read(10)) for _ in range(n_layers)]

        def read(shape):
            n = int(np.prod(shape))
            return np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()

        layers, acts = [], []
        for kind_code, act_code, d0, d1 in table:
            acts.append(ACTIVATIONS[act_code])
            if _KIND_NAME[kind_code] == "dense":
                layers.append(DenseLayer(Tensor(read((d0, d1)), requires_grad=True),
                                         Tensor(read((d1,)), requires_grad=True)))
            else:
                layers.append(CondBatchNormLayer(
                    scale_w=Tensor(read((d0, d1)), requires_grad=True),
                    scale_b=Tensor(read((d1,)), requires_grad=True),
                    shift_w=Tensor(read((d0, d1)), requires_grad=True),
                    shift_b=Tensor(read((d1,)), requires_grad=True),
                    running_mean=read((d1,)), running_var=read((d1,))))
    return MlpParams(layers=layers, activations=acts,
                     cond_dim=None if cond_dim < 0 else cond_dim,
                     input_latent=bool(input_latent))


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# gradient audit

def finite_difference_audit(loss_fn, named_params: list[tuple[str, Tensor]],
                            h: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    loss_fn() must rebuild the forward graph from the current parameter
    values and return a scalar Tensor.
    """
    for _, p in named_params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, p in named_params:
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(loss_fn().data)
            flat[j] = orig - h
            dn = float(loss_fn().data)
            flat[j] = orig
            fd = (up - dn) / (2 * h)
            a = auto.reshape(-1)[j]
            denom = max(abs(fd), abs(a), 1e-6)
            worst = max(worst, abs(a - fd) / denom)
    return worst
