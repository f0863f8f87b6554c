"""Network layers with hand-derived backward passes.

Every layer exposes the same functional surface: ``param_specs`` declares
named parameter arrays, ``forward(x, params, mode)`` returns the output
plus an opaque cache, and ``backward(dy, cache, params)`` returns the
input gradient plus a dict of parameter gradients.  Parameters live in a
flat name->array dict owned by the caller, so the whole network can be
copied, perturbed, or serialized without touching layer objects.

Spatial convolutions use "same" zero padding with ceil-mode output sizes:
an H x W map with stride s comes out ceil(H/s) x ceil(W/s).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised when a layer produces NaN or infinity."""

    def __init__(self, layer_name, stage="forward"):
        super().__init__(f"non-finite values in {stage} of layer {layer_name!r}")
        self.layer_name = layer_name


class ParamSpec(NamedTuple):
    name: str
    shape: tuple
    init: str        # kaiming | zeros | ones
    fan_in: int = 0


def kaiming_init(shape, fan_in, rng) -> np.ndarray:
    """He-style init: i.i.d. normal with mean 0, std sqrt(2/fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(layers, rng, dtype=np.float32) -> dict[str, np.ndarray]:
    """Draw all parameters in declaration order (deterministic given rng)."""
    params = {}
    for layer in layers:
        for spec in layer.param_specs():
            if spec.init == "kaiming":
                arr = kaiming_init(spec.shape, spec.fan_in, rng)
            elif spec.init == "zeros":
                arr = np.zeros(spec.shape)
            elif spec.init == "ones":
                arr = np.ones(spec.shape)
            else:
                raise ValueError(f"unknown init kind {spec.init!r}")
            params[spec.name] = arr.astype(dtype)
    return params


def same_pad_amounts(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for ceil-mode same padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def relu6(x):
    return np.minimum(np.maximum(x, 0.0), 6.0)


def relu6_grad(x, dy):
    return dy * ((x > 0.0) & (x < 6.0))


# ---------------------------------------------------------------------------


class Conv2d:
    """2-D cross-correlation, optionally biased, same padding, NCHW layout.

    1x1 kernels skip patch extraction entirely and run as a strided
    channel matmul; larger kernels go through im2col + GEMM with the
    gather/scatter handled by the active kernel backend.
    """

    def __init__(self, name, in_ch, out_ch, kernel=1, stride=1, bias=True):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.bias = bias

    def param_specs(self):
        k = self.kernel
        specs = [ParamSpec(f"{self.name}.w", (self.out_ch, self.in_ch, k, k), "kaiming", self.in_ch * k * k)]
        if self.bias:
            specs.append(ParamSpec(f"{self.name}.b", (self.out_ch,), "zeros"))
        return specs

    def forward(self, x, params, mode="train"):
        w = params[f"{self.name}.w"]
        if x.shape[1] != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} input channels, got {x.shape[1]}")
        b, c, h, wd = x.shape
        k, s = self.kernel, self.stride
        oh, pt, _ = same_pad_amounts(h, k, s)
        ow, pl, _ = same_pad_amounts(wd, k, s)
        w2 = w.reshape(self.out_ch, c * k * k)

        if k == 1:
            xs = x[:, :, ::s, ::s]
            feat = xs.reshape(b, c, oh * ow)
            cache = ("pointwise", x.shape, feat, s, oh, ow)
        else:
            _, _, pb = same_pad_amounts(h, k, s)
            _, _, pr = same_pad_amounts(wd, k, s)
            xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
            cols = kernels.im2col(xp, k, k, s, oh, ow)
            feat = cols.reshape(b, c * k * k, oh * ow)
            cache = ("general", x.shape, feat, xp.shape, (pt, pl), s, oh, ow)

        out = np.matmul(w2, feat).reshape(b, self.out_ch, oh, ow)
        if self.bias:
            out += params[f"{self.name}.b"][None, :, None, None]
        return out, cache

    def backward(self, dy, cache, params):
        w = params[f"{self.name}.w"]
        b = dy.shape[0]
        k, s = self.kernel, self.stride
        w2 = w.reshape(self.out_ch, -1)
        dout2 = dy.reshape(b, self.out_ch, -1)
        grads = {}
        if self.bias:
            grads[f"{self.name}.b"] = dy.sum(axis=(0, 2, 3))

        if cache[0] == "pointwise":
            _, x_shape, feat, s, oh, ow = cache
            grads[f"{self.name}.w"] = np.tensordot(dout2, feat, axes=([0, 2], [0, 2])).reshape(w.shape)
            dxs = np.matmul(w2.T, dout2).reshape(b, self.in_ch, oh, ow)
            dx = np.zeros(x_shape, dtype=dy.dtype)
            dx[:, :, ::s, ::s] = dxs
        else:
            _, x_shape, feat, xp_shape, (pt, pl), s, oh, ow = cache
            grads[f"{self.name}.w"] = np.tensordot(dout2, feat, axes=([0, 2], [0, 2])).reshape(w.shape)
            dcols = np.matmul(w2.T, dout2).reshape(b, self.in_ch, k, k, oh, ow)
            dxp = kernels.col2im(dcols, xp_shape, s)
            dx = dxp[:, :, pt:pt + x_shape[2], pl:pl + x_shape[3]]
        return np.ascontiguousarray(dx), grads


class DepthwiseConv:
    """Per-channel 3x3 convolution: channel count preserved, same padding."""

    def __init__(self, name, channels, kernel=3, stride=1):
        self.name = name
        self.channels = channels
        self.kernel = kernel
        self.stride = stride

    def param_specs(self):
        k = self.kernel
        return [ParamSpec(f"{self.name}.w", (self.channels, k, k), "kaiming", k * k)]

    def forward(self, x, params, mode="train"):
        w = params[f"{self.name}.w"]
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        _, _, h, wd = x.shape
        k, s = self.kernel, self.stride
        oh, pt, pb = same_pad_amounts(h, k, s)
        ow, pl, pr = same_pad_amounts(wd, k, s)
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        out = kernels.depthwise_forward(xp, w, s, oh, ow)
        return out, (x.shape, xp, (pt, pl))

    def backward(self, dy, cache, params):
        w = params[f"{self.name}.w"]
        x_shape, xp, (pt, pl) = cache
        dxp, dw = kernels.depthwise_backward(dy, xp, w, self.stride)
        dx = dxp[:, :, pt:pt + x_shape[2], pl:pl + x_shape[3]]
        return np.ascontiguousarray(dx), {f"{self.name}.w": dw}


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by batch statistics (biased variance,
    eps=1e-5) and folds them into the running estimates with momentum 0.1;
    inference mode uses the running estimates and refuses to run before
    any batch has been seen.  Running stats live in the parameter dict so
    they serialize with the weights; they receive no gradients.
    """

    EPS = 1e-5
    MOMENTUM = 0.1
    STAT_SUFFIXES = ("running_mean", "running_var", "running_count")

    def __init__(self, name, channels):
        self.name = name
        self.channels = channels

    def param_specs(self):
        n, c = self.name, (self.channels,)
        return [
            ParamSpec(f"{n}.gamma", c, "ones"),
            ParamSpec(f"{n}.beta", c, "zeros"),
            ParamSpec(f"{n}.running_mean", c, "zeros"),
            ParamSpec(f"{n}.running_var", c, "ones"),
            ParamSpec(f"{n}.running_count", (1,), "zeros"),
        ]

    def forward(self, x, params, mode="train"):
        gamma = params[f"{self.name}.gamma"]
        beta = params[f"{self.name}.beta"]
        if mode == "train":
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.MOMENTUM
            params[f"{self.name}.running_mean"][:] = (1 - m) * params[f"{self.name}.running_mean"] + m * mean
            params[f"{self.name}.running_var"][:] = (1 - m) * params[f"{self.name}.running_var"] + m * var
            params[f"{self.name}.running_count"][:] += 1
        else:
            if params[f"{self.name}.running_count"][0] == 0:
                raise RuntimeError(f"{self.name}: inference requested before any statistics exist")
            mean = params[f"{self.name}.running_mean"]
            var = params[f"{self.name}.running_var"]
        inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        return out, (xhat, inv_std, mode)

    def backward(self, dy, cache, params):
        gamma = params[f"{self.name}.gamma"]
        xhat, inv_std, mode = cache
        grads = {
            f"{self.name}.gamma": (dy * xhat).sum(axis=(0, 2, 3)),
            f"{self.name}.beta": dy.sum(axis=(0, 2, 3)),
        }
        dxhat = dy * gamma[None, :, None, None]
        if mode == "train":
            mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv_std[None, :, None, None] * (dxhat - mean_d - xhat * mean_dx)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, grads


class ReLU6:
    def __init__(self, name):
        self.name = name

    def param_specs(self):
        return []

    def forward(self, x, params, mode="train"):
        return relu6(x), x

    def backward(self, dy, cache, params):
        return relu6_grad(cache, dy), {}


class GlobalMaxPool:
    """Spatial maximum per channel: (B,C,H,W) -> (B,C).

    The backward pass routes each channel's gradient to the first argmax
    cell in row-major order, which makes tie handling deterministic.
    """

    def __init__(self, name):
        self.name = name

    def param_specs(self):
        return []

    def forward(self, x, params, mode="train"):
        b, c, h, w = x.shape
        if h < 1 or w < 1:
            raise ValueError(f"{self.name}: empty spatial dimensions {x.shape}")
        flat = x.reshape(b, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
        return out, (x.shape, idx)

    def backward(self, dy, cache, params):
        x_shape, idx = cache
        b, c, h, w = x_shape
        dflat = np.zeros((b, c, h * w), dtype=dy.dtype)
        np.put_along_axis(dflat, idx[:, :, None], dy[:, :, None], axis=2)
        return dflat.reshape(x_shape), {}


class Linear:
    """Affine map y = x W^T + b on (B, in) inputs."""

    def __init__(self, name, in_features, out_features):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features

    def param_specs(self):
        return [
            ParamSpec(f"{self.name}.w", (self.out_features, self.in_features), "kaiming", self.in_features),
            ParamSpec(f"{self.name}.b", (self.out_features,), "zeros"),
        ]

    def forward(self, x, params, mode="train"):
        if x.shape[1] != self.in_features:
            raise ValueError(f"{self.name}: expected {self.in_features} features, got {x.shape[1]}")
        return x @ params[f"{self.name}.w"].T + params[f"{self.name}.b"], x

    def backward(self, dy, cache, params):
        x = cache
        grads = {
            f"{self.name}.w": dy.T @ x,
            f"{self.name}.b": dy.sum(axis=0),
        }
        return dy @ params[f"{self.name}.w"], grads


class VectorReLU6:
    """ReLU6 on (B, F) activations between the two head linears."""

    def __init__(self, name):
        self.name = name

    def param_specs(self):
        return []

    def forward(self, x, params, mode="train"):
        return relu6(x), x

    def backward(self, dy, cache, params):
        return relu6_grad(cache, dy), {}


class BottleneckBlock:
    """Inverted residual block: expand 1x1 -> depthwise 3x3 -> project 1x1.

    ReLU6 follows the expansion and depthwise stages; the projection is
    linear.  The input is added back when the block is shape-preserving
    (stride 1 and equal channel counts).
    """

    def __init__(self, name, in_ch, out_ch, expansion, stride):
        hidden = in_ch * expansion
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.expansion = expansion
        self.stride = stride
        self.residual = stride == 1 and in_ch == out_ch
        self.expand = Conv2d(f"{name}.expand.conv", in_ch, hidden, 1, 1, bias=False)
        self.expand_bn = BatchNorm2d(f"{name}.expand.bn", hidden)
        self.dw = DepthwiseConv(f"{name}.dw.conv", hidden, 3, stride)
        self.dw_bn = BatchNorm2d(f"{name}.dw.bn", hidden)
        self.project = Conv2d(f"{name}.project.conv", hidden, out_ch, 1, 1, bias=False)
        self.project_bn = BatchNorm2d(f"{name}.project.bn", out_ch)
        self._chain = [self.expand, self.expand_bn, "relu6", self.dw, self.dw_bn, "relu6", self.project, self.project_bn]

    def param_specs(self):
        specs = []
        for piece in self._chain:
            if piece != "relu6":
                specs.extend(piece.param_specs())
        return specs

    def forward(self, x, params, mode="train"):
        caches = []
        y = x
        for piece in self._chain:
            if piece == "relu6":
                caches.append(("relu6", y))
                y = relu6(y)
            else:
                y, c = piece.forward(y, params, mode)
                caches.append((piece, c))
        if self.residual:
            y = y + x
        return y, caches

    def backward(self, dy, caches, params):
        grads = {}
        d = dy
        for piece, c in reversed(caches):
            if piece == "relu6":
                d = relu6_grad(c, d)
            else:
                d, g = piece.backward(d, c, params)
                grads.update(g)
        if self.residual:
            d = d + dy
        return d, grads
