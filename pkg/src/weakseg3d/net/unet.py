"""
A small 3D U-Net with hand-written backward pass.

Each level has two conv - instance norm - leaky ReLU blocks; levels below the
first downsample with a strided first conv. The decoder upsamples with a
transposed conv whose kernel equals the stride, concatenates the skip, runs two
blocks, and a final 1x1x1 conv produces the foreground logit.

Convs followed by instance norm carry no bias (the norm cancels it). With
``norm="none"`` the blocks become conv(+bias) - leaky ReLU.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from weakseg3d.errors import InvalidArgumentError, InvalidStateError
from weakseg3d.net import layers as L


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 2
    base_channels: int = 8
    pooling_strides: tuple = ((1, 1, 1), (2, 2, 2))
    kernel_sizes: tuple = ((3, 3, 3), (3, 3, 3))
    in_channels: int = 1
    out_channels: int = 1
    norm: str = "instance"

    def __post_init__(self):
        object.__setattr__(self, "pooling_strides", tuple(tuple(int(v) for v in s) for s in self.pooling_strides))
        object.__setattr__(self, "kernel_sizes", tuple(tuple(int(v) for v in k) for k in self.kernel_sizes))
        if self.levels < 1:
            raise InvalidArgumentError("levels must be >= 1")
        if len(self.pooling_strides) != self.levels or len(self.kernel_sizes) != self.levels:
            raise InvalidArgumentError("need one stride and one kernel size per level")
        if any(len(s) != 3 or min(s) < 1 for s in self.pooling_strides):
            raise InvalidArgumentError("strides must be positive 3-vectors")
        if any(len(k) != 3 or min(k) < 1 or any(v % 2 == 0 for v in k) for k in self.kernel_sizes):
            raise InvalidArgumentError("kernel sizes must be odd positive 3-vectors")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise InvalidArgumentError("channel counts must be >= 1")
        if self.norm not in ("instance", "none"):
            raise InvalidArgumentError(f"unknown norm {self.norm!r}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def total_stride(self, level: int) -> np.ndarray:
        out = np.ones(3, dtype=int)
        for s in self.pooling_strides[1 : level + 1]:
            out *= np.array(s)
        return out

    def check_input(self, spatial) -> None:
        total = self.total_stride(self.levels - 1)
        if len(spatial) != 3 or any(n % t for n, t in zip(spatial, total)):
            raise InvalidArgumentError(f"input dims {tuple(spatial)} not divisible by total stride {tuple(total)}")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "pooling_strides": [list(s) for s in self.pooling_strides],
            "kernel_sizes": [list(k) for k in self.kernel_sizes],
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _param_shapes(cfg: UNetConfig):
    shapes = OrderedDict()
    inst = cfg.norm == "instance"

    def block(prefix, cin, cout, k):
        shapes[f"{prefix}.w"] = (cout, cin, *k)
        if inst:
            shapes[f"{prefix}.gamma"] = (cout,)
            shapes[f"{prefix}.beta"] = (cout,)
        else:
            shapes[f"{prefix}.b"] = (cout,)

    cin = cfg.in_channels
    for lv in range(cfg.levels):
        c = cfg.channels(lv)
        block(f"enc{lv}.0", cin, c, cfg.kernel_sizes[lv])
        block(f"enc{lv}.1", c, c, cfg.kernel_sizes[lv])
        cin = c
    for lv in range(cfg.levels - 1, 0, -1):
        c, cs = cfg.channels(lv), cfg.channels(lv - 1)
        # transposed conv weight in conv layout: (channels at level lv, channels at lv-1, *stride)
        shapes[f"up{lv}.w"] = (c, cs, *cfg.pooling_strides[lv])
        block(f"dec{lv - 1}.0", 2 * cs, cs, cfg.kernel_sizes[lv - 1])
        block(f"dec{lv - 1}.1", cs, cs, cfg.kernel_sizes[lv - 1])
    shapes["head.w"] = (cfg.out_channels, cfg.channels(0), 1, 1, 1)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


class UNetParameters:
    """Named weights with matching gradient accumulators and momentum buffers."""

    def __init__(self, values: "OrderedDict[str, np.ndarray]"):
        self.values = OrderedDict((k, np.ascontiguousarray(v)) for k, v in values.items())
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.values.items())
        self.momentum = OrderedDict((k, np.zeros_like(v)) for k, v in self.values.items())

    @classmethod
    def init(cls, cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> "UNetParameters":
        """He (fan-in) initialization; norm scales at 1, shifts and biases at 0."""
        rng = np.random.default_rng(seed)
        vals = OrderedDict()
        for name, shape in _param_shapes(cfg).items():
            kind = name.rsplit(".", 1)[1]
            if kind == "w":
                fan_in = shape[0] if name.startswith("up") else int(np.prod(shape[1:]))
                vals[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
            elif kind == "gamma":
                vals[name] = np.ones(shape, dtype)
            else:
                vals[name] = np.zeros(shape, dtype)
        return cls(vals)

    def __getitem__(self, name):
        return self.values[name]

    def names(self):
        return list(self.values)

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def n_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype) -> "UNetParameters":
        out = UNetParameters(OrderedDict((k, v.astype(dtype)) for k, v in self.values.items()))
        for k in self.values:
            out.momentum[k] = self.momentum[k].astype(dtype)
        return out

    def copy(self) -> "UNetParameters":
        out = UNetParameters(OrderedDict((k, v.copy()) for k, v in self.values.items()))
        for k in self.values:
            out.grads[k] = self.grads[k].copy()
            out.momentum[k] = self.momentum[k].copy()
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.values.items():
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def equal(self, other: "UNetParameters") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.values[k], other.values[k]) for k in self.values
        )


@dataclass
class ForwardCache:
    x_shape: tuple
    blocks: dict = field(default_factory=dict)
    up_inputs: dict = field(default_factory=dict)
    head_input: np.ndarray | None = None


def _block_fwd(cfg, params, prefix, x, stride, store):
    w = params[f"{prefix}.w"]
    if cfg.norm == "instance":
        z = L.conv3d(x, w, stride)
        y, nctx = L.instance_norm(z, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])
    else:
        y = L.conv3d(x, w, stride, bias=params[f"{prefix}.b"])
        nctx = None
    out = L.leaky_relu(y)
    if store is not None:
        store[prefix] = (x, stride, nctx, y)
    return out


def _block_bwd(cfg, params, prefix, g, store, need_dx=True):
    x, stride, nctx, y = store[prefix]
    g = L.leaky_relu_backward(g, y)
    grads = params.grads
    if cfg.norm == "instance":
        g, dgamma, dbeta = L.instance_norm_backward(g, nctx, params[f"{prefix}.gamma"])
        grads[f"{prefix}.gamma"] += dgamma
        grads[f"{prefix}.beta"] += dbeta
    else:
        grads[f"{prefix}.b"] += g.sum(axis=(0, 1, 2, 3))
    dx, dw = L.conv3d_backward(g, x, params[f"{prefix}.w"], stride, need_dx=need_dx)
    grads[f"{prefix}.w"] += dw
    return dx


def unet_forward(cfg: UNetConfig, params: UNetParameters, x: np.ndarray, cache: bool = True):
    """Logits of shape ``(N, out_channels, D, H, W)`` and, if requested, a backward cache.

    ``x`` is ``(N, C, D, H, W)``; activations are kept channels-last internally.
    """
    x = np.asarray(x)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise InvalidArgumentError(f"expected (N, {cfg.in_channels}, D, H, W) input, got {x.shape}")
    cfg.check_input(x.shape[2:])
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1), dtype=params.dtype)  # channels last inside
    fc = ForwardCache(x.shape) if cache else None
    store = fc.blocks if cache else None

    h = x
    skips = []
    for lv in range(cfg.levels):
        stride = cfg.pooling_strides[lv] if lv > 0 else (1, 1, 1)
        h = _block_fwd(cfg, params, f"enc{lv}.0", h, stride, store)
        h = _block_fwd(cfg, params, f"enc{lv}.1", h, (1, 1, 1), store)
        skips.append(h)
    for lv in range(cfg.levels - 1, 0, -1):
        skip = skips[lv - 1]
        if cache:
            fc.up_inputs[lv] = h
        up = L.conv_transpose3d(h, params[f"up{lv}.w"], cfg.pooling_strides[lv], skip.shape[1:4])
        h = np.concatenate([up, skip], axis=4)
        h = _block_fwd(cfg, params, f"dec{lv - 1}.0", h, (1, 1, 1), store)
        h = _block_fwd(cfg, params, f"dec{lv - 1}.1", h, (1, 1, 1), store)
    if cache:
        fc.head_input = h
    logits = L.conv3d(h, params["head.w"], 1, bias=params["head.b"])
    return logits.transpose(0, 4, 1, 2, 3), fc


def unet_backward(
    cfg: UNetConfig, params: UNetParameters, cache: ForwardCache | None, grad_logits, input_grad: bool = True
):
    """Accumulate parameter gradients into ``params.grads``; returns the input gradient (or None)."""
    if cache is None or cache.head_input is None:
        raise InvalidStateError("unet_backward needs the cache of a forward pass run with cache=True")
    g = np.asarray(grad_logits, dtype=params.dtype)
    h = cache.head_input
    if g.shape != (h.shape[0], cfg.out_channels, *h.shape[1:4]):
        raise InvalidArgumentError(f"grad_logits shape {g.shape} does not match the cached forward")
    g = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))
    grads = params.grads
    grads["head.b"] += g.sum(axis=(0, 1, 2, 3))
    g, dw = L.conv3d_backward(g, h, params["head.w"], 1)
    grads["head.w"] += dw

    skip_grads = {}
    for lv in range(1, cfg.levels):
        g = _block_bwd(cfg, params, f"dec{lv - 1}.1", g, cache.blocks)
        g = _block_bwd(cfg, params, f"dec{lv - 1}.0", g, cache.blocks)
        cs = cfg.channels(lv - 1)
        g_up, skip_grads[lv - 1] = np.ascontiguousarray(g[..., :cs]), g[..., cs:]
        g, dw = L.conv_transpose3d_backward(g_up, cache.up_inputs[lv], params[f"up{lv}.w"], cfg.pooling_strides[lv])
        grads[f"up{lv}.w"] += dw
    for lv in range(cfg.levels - 1, -1, -1):
        if lv in skip_grads:
            g = g + skip_grads[lv]
        g = _block_bwd(cfg, params, f"enc{lv}.1", g, cache.blocks)
        g = _block_bwd(cfg, params, f"enc{lv}.0", g, cache.blocks, need_dx=input_grad or lv > 0)
    return g.transpose(0, 4, 1, 2, 3) if input_grad else None
