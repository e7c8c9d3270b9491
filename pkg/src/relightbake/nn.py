"""A small dense-tensor network library with hand-written backward passes.

Image tensors are NHWC. Layers cache what they need during ``forward`` and
``backward`` returns the input gradient while accumulating parameter
gradients into ``Param.grad``. Everything is dtype-generic so the same code
runs in float32 for training and float64 for finite-difference checks.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict

import numpy as np
from scipy.special import erf

from . import _pykernels, kernels
from .geom import RngStream

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    pass


class Param:
    def __init__(self, value: np.ndarray, decay: bool = True):
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay

    def zero_grad(self):
        self.grad[...] = 0.0


class Module:
    """Base class: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Param):
                yield prefix + name, v
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{name}.")
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.value) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in checkpoint")
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ValueError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.value.shape}")
            p.value = arr.astype(p.value.dtype).copy()
            p.grad = np.zeros_like(p.value)

    def num_parameters(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def __call__(self, x):
        return self.forward(x)


def _check_channels(x: np.ndarray, expected: int, layer: str):
    if x.shape[-1] != expected:
        raise ValueError(f"{layer}: input shape {x.shape} does not match expected channels {expected}")


def kaiming_uniform(rng: RngStream, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return ((rng.uniform(shape) * 2.0 - 1.0) * bound).astype(dtype)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: RngStream, zero_init: bool = False, dtype=np.float32):
        self.cin, self.cout = cin, cout
        w = np.zeros((cin, cout), dtype) if zero_init else kaiming_uniform(rng, cin, (cin, cout), dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(cout, dtype))

    def forward(self, x):
        _check_channels(x, self.cin, "linear")
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, g):
        x2 = self._x.reshape(-1, self.cin)
        g2 = g.reshape(-1, self.cout)
        self.weight.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return g @ self.weight.value.T


class Conv2d(Module):
    """'same' padded convolution with kernel 1 or 3 on NHWC tensors."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: RngStream, zero_init: bool = False, dtype=np.float32):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        self.cin, self.cout, self.kernel = cin, cout, kernel
        fan_in = cin * kernel * kernel
        shape = (kernel * kernel * cin, cout)
        w = np.zeros(shape, dtype) if zero_init else kaiming_uniform(rng, fan_in, shape, dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(cout, dtype))

    def forward(self, x):
        _check_channels(x, self.cin, "conv2d")
        self._x = x
        if self.kernel == 1:
            return x @ self.weight.value + self.bias.value
        impl = kernels if x.dtype == np.float32 else _pykernels
        return impl.conv3x3_forward(x, self.weight.value, self.bias.value)

    def backward(self, g):
        x = self._x
        if self.kernel == 1:
            self.weight.grad += x.reshape(-1, self.cin).T @ g.reshape(-1, self.cout)
            self.bias.grad += g.reshape(-1, self.cout).sum(axis=0)
            return g @ self.weight.value.T
        impl = kernels if x.dtype == np.float32 and g.dtype == np.float32 else _pykernels
        dx, dw, db = impl.conv3x3_backward(x, self.weight.value, g)
        self.weight.grad += dw.astype(self.weight.grad.dtype, copy=False)
        self.bias.grad += db.astype(self.bias.grad.dtype, copy=False)
        return dx

    def macs(self, h: int, w: int) -> int:
        return self.kernel * self.kernel * self.cin * self.cout * h * w


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.channels, self.eps = channels, eps
        self.scale = Param(np.ones(channels, dtype))
        self.shift = Param(np.zeros(channels, dtype))

    def forward(self, x):
        _check_channels(x, self.channels, "instance-norm")
        impl = kernels if x.dtype == np.float32 else _pykernels
        y, self._xhat, self._inv = impl.instance_norm_forward(x, self.scale.value, self.shift.value, self.eps)
        return y

    def backward(self, g):
        impl = kernels if g.dtype == np.float32 and self._xhat.dtype == np.float32 else _pykernels
        dx, dscale, dshift = impl.instance_norm_backward(g, self._xhat, self._inv, self.scale.value)
        self.scale.grad += dscale.astype(self.scale.grad.dtype, copy=False)
        self.shift.grad += dshift.astype(self.shift.grad.dtype, copy=False)
        return dx


class GELU(Module):
    """Exact (erf) GELU; float32 goes through the compiled kernel when built."""

    def forward(self, x):
        self._x = x
        if x.dtype == np.float32:
            y, self._cdf = kernels.gelu_cdf(x)
            return y
        self._cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        return x * self._cdf

    def backward(self, g):
        x = self._x
        if x.dtype == np.float32 and g.dtype == np.float32:
            return kernels.gelu_grad(x, self._cdf, g)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (self._cdf + x * pdf)


def gelu(x):
    if x.dtype == np.float32:
        return kernels.gelu_cdf(x)[0]
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Sigmoid(Module):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


def _up_axis(x, axis):
    n = x.shape[axis]
    prev = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    nxt = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_adjoint(g, axis):
    shape = list(g.shape)
    n = shape[axis] // 2
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    ge = np.take(g, 0, axis=axis + 1)
    go = np.take(g, 1, axis=axis + 1)
    dx = 0.75 * (ge + go)
    idx = [slice(None)] * dx.ndim

    def sl(s):
        idx2 = list(idx)
        idx2[axis] = s
        return tuple(idx2)

    dx[sl(slice(0, n - 1))] += 0.25 * ge[sl(slice(1, n))]
    dx[sl(slice(0, 1))] += 0.25 * ge[sl(slice(0, 1))]
    dx[sl(slice(1, n))] += 0.25 * go[sl(slice(0, n - 1))]
    dx[sl(slice(n - 1, n))] += 0.25 * go[sl(slice(n - 1, n))]
    return dx


def upsample2x(x):
    """Bilinear x2 (half-pixel centers, edge clamp) on NHWC."""
    return _up_axis(_up_axis(x, 1), 2)


class Upsample2x(Module):
    def forward(self, x):
        return upsample2x(x)

    def backward(self, g):
        return _up_axis_adjoint(_up_axis_adjoint(g, 2), 1)


class ZeroInsert2x(Module):
    """Stride-2 zero insertion; followed by a 3x3 conv it is a transposed convolution."""

    def forward(self, x):
        n, h, w, c = x.shape
        out = np.zeros((n, 2 * h, 2 * w, c), dtype=x.dtype)
        out[:, ::2, ::2, :] = x
        return out

    def backward(self, g):
        return g[:, ::2, ::2, :]


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class Residual(Module):
    def __init__(self, body: Module):
        self.body = body

    def forward(self, x):
        return x + self.body.forward(x)

    def backward(self, g):
        return g + self.body.backward(g)


def conv_norm_act(cin: int, cout: int, kernel: int, rng: RngStream, dtype=np.float32) -> Sequential:
    return Sequential(Conv2d(cin, cout, kernel, rng, dtype=dtype), InstanceNorm(cout, dtype=dtype), GELU())


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: RngStream, dtype=np.float32):
        self.layers = [Linear(a, b, rng.split("layer", i), dtype=dtype)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.acts = [GELU() for _ in self.layers[:-1]]

    def forward(self, x):
        for lin, act in zip(self.layers[:-1], self.acts):
            x = act.forward(lin.forward(x))
        return self.layers[-1].forward(x)

    def backward(self, g):
        g = self.layers[-1].backward(g)
        for lin, act in zip(reversed(self.layers[:-1]), reversed(self.acts)):
            g = lin.backward(act.backward(g))
        return g


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def _mask_weights(shape, mask, dtype):
    if mask is None:
        return None, float(np.prod(shape))
    m = np.broadcast_to(np.asarray(mask, dtype=dtype), shape)
    return m, float(np.sum(m, dtype=np.float64))


def l1_loss(pred, target, mask=None):
    """Mean absolute error over (masked) elements. Returns ``(loss, dloss/dpred)``."""
    if pred.shape != np.shape(target):
        raise ValueError(f"l1: pred shape {pred.shape} != target shape {np.shape(target)}")
    diff = pred - target
    m, count = _mask_weights(pred.shape, mask, pred.dtype)
    count = max(count, 1.0)
    if m is None:
        return float(np.sum(np.abs(diff), dtype=np.float64) / count), (np.sign(diff) / count).astype(pred.dtype)
    return (float(np.sum(m * np.abs(diff), dtype=np.float64) / count),
            (m * np.sign(diff) / count).astype(pred.dtype))


def bce_logit_loss(logit, target, mask=None):
    """Binary cross entropy on logits, stable form ``max(z,0) - z*y + log(1+exp(-|z|))``."""
    target = np.asarray(target)
    if logit.shape != target.shape:
        raise ValueError(f"bce: logit shape {logit.shape} != target shape {target.shape}")
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("bce targets must be 0 or 1")
    z = logit
    per = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    grad = sigmoid(z) - target
    m, count = _mask_weights(z.shape, mask, z.dtype)
    count = max(count, 1.0)
    if m is None:
        return float(np.sum(per, dtype=np.float64) / count), (grad / count).astype(z.dtype)
    return float(np.sum(m * per, dtype=np.float64) / count), (m * grad / count).astype(z.dtype)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------

def cosine_lr(step: int, total: int, lr0: float) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def exp_decay_lr(step: int, total: int, lr0: float, final_ratio: float = 0.1) -> float:
    return lr0 * final_ratio ** (min(step, total) / total)


class Adam:
    """Adam followed by decoupled weight decay on params flagged ``decay``."""

    def __init__(self, params: list[Param], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr0 = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, lr: float | None = None):
        lr = self.lr0 if lr is None else lr
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError("non-finite gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= (lr * upd).astype(p.value.dtype)
            if self.weight_decay and p.decay:
                p.value -= (lr * self.weight_decay * p.value).astype(p.value.dtype)

    def state(self, names: list[str]) -> dict:
        out = {}
        for n, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{n}"] = m
            out[f"adam.v.{n}"] = v
        out["adam.step"] = np.array([self.step_count], dtype=np.float32)
        return out

    def load_state(self, names: list[str], state: dict) -> None:
        if "adam.step" not in state:
            return
        self.step_count = int(state["adam.step"][0])
        for i, n in enumerate(names):
            self.m[i] = state[f"adam.m.{n}"].astype(self.m[i].dtype).copy()
            self.v[i] = state[f"adam.v.{n}"].astype(self.v[i].dtype).copy()


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

MAGIC = b"RBCK"
VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Little-endian: magic, u32 version, u32 meta length, meta JSON, u32 count,
    then per tensor u32 name length, name, u32 rank, u32 dims, float32 data."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    return tensors, meta
