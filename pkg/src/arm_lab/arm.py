"""The amendment head and the small networks built around it.

The head rearranges backbone channels into space, applies one shared
single-channel weighting convolution without padding, normalizes, averages
the surviving channels, and subtracts a running estimate of the generic
(class-independent) feature before classification. The subtraction state is
a buffer, not a parameter; only its smoothing coefficient can learn.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .arrange import ShuffleSpec, max_shuffle_ratio, pixel_shuffle, pixel_unshuffle
from .errors import ConfigError, DataError, UninitializedStateError
from .tensor import (
    ConvGeometry,
    RunningStats,
    Tensor,
    batchnorm,
    batchnorm_backward,
    channel_mean,
    channel_mean_backward,
    conv2d_backward,
    conv2d_forward,
    kaiming_uniform,
    linear,
    linear_backward,
    load_tensor,
    relu,
    relu_backward,
    save_tensor,
)

CHECKPOINT_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ArmConfig:
    """Geometry and state settings of the amendment head.

    ratio defaults to the largest square divisor of the channel count; the
    weighting kernel defaults to two clusters wide with a stride of half a
    cluster, so neighbouring windows overlap by one cluster.
    """

    channels: int
    height: int
    width: int
    classes: int
    ratio: int | None = None
    da_kernel: int | None = None
    da_stride: int | None = None
    smoothing_init: float = 0.3
    smoothing_learnable: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise ConfigError(
                f"invalid input shape ({self.channels}, {self.height}, {self.width})"
            )
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if not 0.0 <= self.smoothing_init <= 1.0:
            raise ConfigError(
                f"smoothing_init must be in [0, 1], got {self.smoothing_init}"
            )
        resolved = self.ratio if self.ratio is not None else max_shuffle_ratio(self.channels)
        object.__setattr__(self, "ratio", int(resolved))
        if self.da_kernel is None:
            object.__setattr__(self, "da_kernel", 2 * self.ratio)
        if self.da_stride is None:
            object.__setattr__(self, "da_stride", max(1, self.ratio // 2))
        spec = self.shuffle_spec  # validates divisibility
        # validates that the kernel fits at least once
        self.da_geometry.out_extent(spec.out_height, "height")
        self.da_geometry.out_extent(spec.out_width, "width")

    @property
    def shuffle_spec(self) -> ShuffleSpec:
        return ShuffleSpec(self.ratio, self.channels, self.height, self.width)

    @property
    def da_geometry(self) -> ConvGeometry:
        oc = self.shuffle_spec.out_channels
        return ConvGeometry(
            kernel=self.da_kernel,
            stride=self.da_stride,
            padding=0,
            in_channels=oc,
            out_channels=oc,
            shared_single_channel=True,
        )

    @property
    def feature_height(self) -> int:
        return self.da_geometry.out_extent(self.shuffle_spec.out_height, "height")

    @property
    def feature_width(self) -> int:
        return self.da_geometry.out_extent(self.shuffle_spec.out_width, "width")

    @property
    def feature_count(self) -> int:
        return self.feature_height * self.feature_width

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "classes": self.classes,
            "ratio": self.ratio,
            "da_kernel": self.da_kernel,
            "da_stride": self.da_stride,
            "smoothing_init": self.smoothing_init,
            "smoothing_learnable": self.smoothing_learnable,
        }


def arm_param_count(config: ArmConfig) -> dict:
    """Learnable parameters per stage of the amendment head."""
    oc = config.shuffle_spec.out_channels
    counts = {
        "arrangement": 0,
        "de_albino": config.da_geometry.param_count,
        "batchnorm": 2 * oc,
        "mean": 0,
        "affinity": 1 if config.smoothing_learnable else 0,
        "fc": (config.feature_count + 1) * config.classes,
    }
    counts["total"] = sum(counts.values())
    return counts


def arm_shape_trace(config: ArmConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-stage output shapes for one sample, input through logits."""
    spec = config.shuffle_spec
    fh, fw = config.feature_height, config.feature_width
    return [
        ("input", (config.channels, config.height, config.width)),
        ("arranged", (spec.out_channels, spec.out_height, spec.out_width)),
        ("weighted", (spec.out_channels, fh, fw)),
        ("normalized", (spec.out_channels, fh, fw)),
        ("pooled", (fh, fw)),
        ("affinity", (fh, fw)),
        ("flattened", (config.feature_count,)),
        ("logits", (config.classes,)),
    ]


# ---------------------------------------------------------------------------
# Affinity splitting: running estimate of the generic feature.


@dataclass
class GenericFeatureState:
    """Smoothing coefficient plus the accumulated generic-feature buffer."""

    smoothing: Tensor
    feature: Tensor | None = None
    initialized: bool = False
    learnable: bool = True

    @classmethod
    def create(cls, init: float = 0.3, learnable: bool = True) -> "GenericFeatureState":
        return cls(smoothing=Tensor(np.array([init], np.float32)), learnable=learnable)

    def clamped_smoothing(self) -> float:
        return float(min(1.0, max(0.0, float(self.smoothing.data[0]))))

    def clamp_param(self) -> None:
        """Project the stored coefficient back into [0, 1] after an update."""
        value = float(self.smoothing.data[0])
        if not 0.0 <= value <= 1.0:
            self.smoothing.data[0] = np.float32(min(1.0, max(0.0, value)))


@dataclass
class AffinityCache:
    train: bool
    lam: float
    buffer: np.ndarray  # float64, the estimate used in the forward pass
    batch_mean: np.ndarray | None = None  # float64, train mode only
    learnable: bool = True


def affinity_batch_mean(features: np.ndarray) -> np.ndarray:
    """Mean feature map over the batch axis, accumulated in 64-bit."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[0] < 1:
        raise DataError(f"expected a non-empty (N, H, W) batch, got {features.shape}")
    return features.mean(axis=0, dtype=np.float64)


def affinity_update(state: GenericFeatureState, batch_mean: np.ndarray) -> None:
    """Fold one batch mean into the buffer: new = lam*batch + (1-lam)*old.

    The first call initializes the buffer to the batch mean outright. Updates
    run in 64-bit and are rounded to storage precision afterwards.
    """
    bm = np.asarray(batch_mean, dtype=np.float64)
    if not state.initialized:
        state.feature = Tensor(bm.astype(np.float32))
        state.initialized = True
        return
    if bm.shape != state.feature.shape:
        raise DataError(
            f"batch mean shape {bm.shape} does not match buffer {state.feature.shape}"
        )
    lam = state.clamped_smoothing()
    mixed = lam * bm + (1.0 - lam) * state.feature.data.astype(np.float64)
    state.feature.data = mixed.astype(np.float32)


def affinity_forward(
    state: GenericFeatureState,
    features: np.ndarray,
    mode: str = "train",
    update_state: bool = True,
) -> tuple[np.ndarray, AffinityCache]:
    """Subtract the generic-feature estimate from each sample's feature map.

    Train mode blends the current batch mean into the estimate before
    subtracting, and the batch-mean path carries gradient; eval subtracts
    the frozen buffer. Evaluating (or a stateless train pass) before any
    batch has initialized the buffer is an error.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3:
        raise DataError(f"expected (N, H, W) features, got shape {features.shape}")
    if mode == "eval":
        if not state.initialized:
            raise UninitializedStateError(
                "generic feature buffer is empty; run at least one training batch"
            )
        buffer = state.feature.data.astype(np.float64)
        out = (features.astype(np.float64) - buffer[None]).astype(np.float32)
        return out, AffinityCache(
            train=False, lam=0.0, buffer=buffer, learnable=state.learnable
        )

    bm = affinity_batch_mean(features)
    if not state.initialized:
        if not update_state:
            raise UninitializedStateError(
                "generic feature buffer is empty; prime it with a stateful batch"
            )
        affinity_update(state, bm)
        buffer = state.feature.data.astype(np.float64)
    else:
        buffer = state.feature.data.astype(np.float64).copy()
        if update_state:
            affinity_update(state, bm)
    lam = state.clamped_smoothing()
    mixed = lam * bm + (1.0 - lam) * buffer
    out = (features.astype(np.float64) - mixed[None]).astype(np.float32)
    return out, AffinityCache(
        train=True, lam=lam, buffer=buffer, batch_mean=bm, learnable=state.learnable
    )


def affinity_backward(
    grad_out: np.ndarray, cache: AffinityCache
) -> tuple[np.ndarray, float]:
    """Gradients w.r.t. the input features and the smoothing coefficient."""
    g = np.asarray(grad_out, dtype=np.float64)
    if not cache.train:
        return g.astype(np.float32), 0.0
    grad_features = g - cache.lam * g.mean(axis=0, keepdims=True)
    grad_smoothing = -float(np.sum(g * (cache.batch_mean - cache.buffer)[None]))
    return grad_features.astype(np.float32), grad_smoothing


# ---------------------------------------------------------------------------
# Building blocks.


class ConvBlock:
    """Bias-free strided convolution, batch normalization, rectification."""

    def __init__(self, rng, in_channels, out_channels, kernel=3, stride=2, padding=1):
        self.geom = ConvGeometry(kernel, stride, padding, in_channels, out_channels)
        fan_in = in_channels * kernel * kernel
        self.kernel = Tensor(kaiming_uniform(rng, self.geom.kernel_shape(), fan_in))
        self.scale = Tensor(np.ones(out_channels, np.float32))
        self.shift = Tensor(np.zeros(out_channels, np.float32))
        self.running = RunningStats.init(out_channels)

    def forward(self, x: Tensor, mode: str, update_state: bool):
        conv_out = conv2d_forward(x, self.kernel, self.geom)
        bn_out, bn_cache = batchnorm(
            conv_out, self.scale, self.shift, self.running, mode,
            update_running=update_state,
        )
        out = relu(bn_out)
        return out, (x, bn_out, bn_cache)

    def backward(self, grad_out: Tensor, cache) -> Tensor:
        x, bn_out, bn_cache = cache
        grad_bn = relu_backward(grad_out, bn_out)
        grad_conv, grad_scale, grad_shift = batchnorm_backward(grad_bn, bn_cache)
        self.scale.add_grad(grad_scale.data)
        self.shift.add_grad(grad_shift.data)
        grad_x, grad_kernel = conv2d_backward(grad_conv, x, self.kernel, self.geom)
        self.kernel.add_grad(grad_kernel.data)
        return grad_x

    def params(self, prefix=""):
        return [
            (prefix + "kernel", self.kernel),
            (prefix + "bn_scale", self.scale),
            (prefix + "bn_shift", self.shift),
        ]

    def state_dict(self, prefix=""):
        out = {name: t.data for name, t in self.params(prefix)}
        out[prefix + "bn_running_mean"] = self.running.mean
        out[prefix + "bn_running_var"] = self.running.var
        return out

    def load_state_dict(self, values, prefix=""):
        _assign(self.kernel, values, prefix + "kernel")
        _assign(self.scale, values, prefix + "bn_scale")
        _assign(self.shift, values, prefix + "bn_shift")
        self.running.mean = _taken(values, prefix + "bn_running_mean", self.running.mean.shape)
        self.running.var = _taken(values, prefix + "bn_running_var", self.running.var.shape)


class TinyBackbone:
    """Stack of stride-2 blocks mapping (N, 1, E, E) to (N, C, E/2^d, E/2^d)."""

    def __init__(self, rng, input_extent: int, widths=(8, 16, 32), in_channels: int = 1):
        if input_extent % (2 ** len(widths)) != 0:
            raise ConfigError(
                f"input extent {input_extent} is not divisible by 2^{len(widths)}"
            )
        self.input_extent = input_extent
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = in_channels
        self.blocks = []
        prev = in_channels
        for w in self.widths:
            self.blocks.append(ConvBlock(rng, prev, w))
            prev = w
        self.out_channels = prev
        self.out_extent = input_extent // (2 ** len(widths))

    def forward(self, x: Tensor, mode: str, update_state: bool):
        caches = []
        for block in self.blocks:
            x, cache = block.forward(x, mode, update_state)
            caches.append(cache)
        return x, caches

    def backward(self, grad_out: Tensor, caches) -> Tensor:
        for block, cache in zip(reversed(self.blocks), reversed(caches)):
            grad_out = block.backward(grad_out, cache)
        return grad_out

    def params(self, prefix=""):
        out = []
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"{prefix}block{i}."))
        return out

    def state_dict(self, prefix=""):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.state_dict(f"{prefix}block{i}."))
        return out

    def load_state_dict(self, values, prefix=""):
        for i, block in enumerate(self.blocks):
            block.load_state_dict(values, f"{prefix}block{i}.")


class ArmHead:
    """Arrange, weight, normalize, pool, split affinity, classify."""

    def __init__(self, rng, config: ArmConfig):
        self.config = config
        geom = config.da_geometry
        self.weighting_kernel = Tensor(
            kaiming_uniform(rng, geom.kernel_shape(), geom.kernel * geom.kernel)
        )
        oc = config.shuffle_spec.out_channels
        self.scale = Tensor(np.ones(oc, np.float32))
        self.shift = Tensor(np.zeros(oc, np.float32))
        self.running = RunningStats.init(oc)
        self.state = GenericFeatureState.create(
            config.smoothing_init, config.smoothing_learnable
        )
        f = config.feature_count
        self.fc_weight = Tensor(kaiming_uniform(rng, (config.classes, f), f))
        self.fc_bias = Tensor(np.zeros(config.classes, np.float32))

    def forward(self, x: Tensor, mode: str, update_state: bool):
        cfg = self.config
        arranged = pixel_shuffle(x, cfg.ratio)
        weighted = conv2d_forward(arranged, self.weighting_kernel, cfg.da_geometry)
        normalized, bn_cache = batchnorm(
            weighted, self.scale, self.shift, self.running, mode,
            update_running=update_state,
        )
        pooled = channel_mean(normalized)
        split, aff_cache = affinity_forward(self.state, pooled.data, mode, update_state)
        flat = Tensor(split.reshape(split.shape[0], cfg.feature_count))
        logits = linear(flat, self.fc_weight, self.fc_bias)
        cache = {
            "arranged": arranged,
            "bn_cache": bn_cache,
            "aff_cache": aff_cache,
            "flat": flat,
            "pooled_shape": pooled.shape,
        }
        return logits, cache

    def backward(self, grad_logits: Tensor, cache) -> Tensor:
        cfg = self.config
        grad_flat, grad_w, grad_b = linear_backward(
            grad_logits, cache["flat"], self.fc_weight
        )
        self.fc_weight.add_grad(grad_w.data)
        self.fc_bias.add_grad(grad_b.data)
        grad_split = grad_flat.data.reshape(cache["pooled_shape"])
        grad_pooled, grad_smoothing = affinity_backward(grad_split, cache["aff_cache"])
        if self.state.learnable:
            self.state.smoothing.add_grad(np.array([grad_smoothing], np.float32))
        oc = cfg.shuffle_spec.out_channels
        grad_norm = channel_mean_backward(Tensor(grad_pooled), oc)
        grad_weighted, grad_scale, grad_shift = batchnorm_backward(
            grad_norm, cache["bn_cache"]
        )
        self.scale.add_grad(grad_scale.data)
        self.shift.add_grad(grad_shift.data)
        grad_arranged, grad_kernel = conv2d_backward(
            grad_weighted, cache["arranged"], self.weighting_kernel, cfg.da_geometry
        )
        self.weighting_kernel.add_grad(grad_kernel.data)
        return pixel_unshuffle(grad_arranged, cfg.ratio)

    def params(self, prefix=""):
        out = [
            (prefix + "weighting_kernel", self.weighting_kernel),
            (prefix + "bn_scale", self.scale),
            (prefix + "bn_shift", self.shift),
            (prefix + "fc_weight", self.fc_weight),
            (prefix + "fc_bias", self.fc_bias),
        ]
        if self.state.learnable:
            out.append((prefix + "smoothing", self.state.smoothing))
        return out

    def post_step(self):
        self.state.clamp_param()

    def state_dict(self, prefix=""):
        out = {
            prefix + "weighting_kernel": self.weighting_kernel.data,
            prefix + "bn_scale": self.scale.data,
            prefix + "bn_shift": self.shift.data,
            prefix + "fc_weight": self.fc_weight.data,
            prefix + "fc_bias": self.fc_bias.data,
            prefix + "smoothing": self.state.smoothing.data,
            prefix + "bn_running_mean": self.running.mean,
            prefix + "bn_running_var": self.running.var,
        }
        if self.state.initialized:
            out[prefix + "generic_feature"] = self.state.feature.data
        return out

    def load_state_dict(self, values, prefix=""):
        _assign(self.weighting_kernel, values, prefix + "weighting_kernel")
        _assign(self.scale, values, prefix + "bn_scale")
        _assign(self.shift, values, prefix + "bn_shift")
        _assign(self.fc_weight, values, prefix + "fc_weight")
        _assign(self.fc_bias, values, prefix + "fc_bias")
        _assign(self.state.smoothing, values, prefix + "smoothing")
        self.running.mean = _taken(values, prefix + "bn_running_mean", self.running.mean.shape)
        self.running.var = _taken(values, prefix + "bn_running_var", self.running.var.shape)
        key = prefix + "generic_feature"
        if key in values:
            fh, fw = self.config.feature_height, self.config.feature_width
            self.state.feature = Tensor(_taken(values, key, (fh, fw)))
            self.state.initialized = True
        else:
            # exact inverse of state_dict: absent buffer means uninitialized
            self.state.feature = None
            self.state.initialized = False


class GapHead:
    """Plain global-average-pool classifier over the backbone output."""

    def __init__(self, rng, channels: int, classes: int):
        self.channels = channels
        self.classes = classes
        self.fc_weight = Tensor(kaiming_uniform(rng, (classes, channels), channels))
        self.fc_bias = Tensor(np.zeros(classes, np.float32))

    def forward(self, x: Tensor, mode: str, update_state: bool):
        n, c, h, w = x.shape
        pooled = Tensor(x.data.mean(axis=(2, 3), dtype=np.float64).astype(np.float32))
        logits = linear(pooled, self.fc_weight, self.fc_bias)
        return logits, {"pooled": pooled, "spatial": (h, w), "channels": c, "batch": n}

    def backward(self, grad_logits: Tensor, cache) -> Tensor:
        grad_pooled, grad_w, grad_b = linear_backward(
            grad_logits, cache["pooled"], self.fc_weight
        )
        self.fc_weight.add_grad(grad_w.data)
        self.fc_bias.add_grad(grad_b.data)
        h, w = cache["spatial"]
        g = grad_pooled.data.astype(np.float64) / (h * w)
        grad_x = np.broadcast_to(
            g[:, :, None, None], (cache["batch"], cache["channels"], h, w)
        )
        return Tensor(grad_x.astype(np.float32))

    def params(self, prefix=""):
        return [(prefix + "fc_weight", self.fc_weight), (prefix + "fc_bias", self.fc_bias)]

    def post_step(self):
        pass

    def state_dict(self, prefix=""):
        return {name: t.data for name, t in self.params(prefix)}

    def load_state_dict(self, values, prefix=""):
        _assign(self.fc_weight, values, prefix + "fc_weight")
        _assign(self.fc_bias, values, prefix + "fc_bias")


class SweepHead:
    """Shared single-channel weighting convolution, flatten, classify.

    Used for kernel-size sweeps: stride 1, no padding, classifier sized to
    whatever spatial extent the kernel leaves over.
    """

    def __init__(self, rng, channels: int, extent: int, kernel: int, classes: int):
        self.geom = ConvGeometry(
            kernel=kernel, stride=1, padding=0,
            in_channels=channels, out_channels=channels,
            shared_single_channel=True,
        )
        out = self.geom.out_extent(extent)
        self.extent = extent
        self.features = channels * out * out
        self.weighting_kernel = Tensor(
            kaiming_uniform(rng, self.geom.kernel_shape(), kernel * kernel)
        )
        self.fc_weight = Tensor(
            kaiming_uniform(rng, (classes, self.features), self.features)
        )
        self.fc_bias = Tensor(np.zeros(classes, np.float32))

    def forward(self, x: Tensor, mode: str, update_state: bool):
        weighted = conv2d_forward(x, self.weighting_kernel, self.geom)
        flat = Tensor(weighted.data.reshape(x.shape[0], self.features))
        logits = linear(flat, self.fc_weight, self.fc_bias)
        return logits, {"x": x, "flat": flat, "weighted_shape": weighted.shape}

    def backward(self, grad_logits: Tensor, cache) -> Tensor:
        grad_flat, grad_w, grad_b = linear_backward(
            grad_logits, cache["flat"], self.fc_weight
        )
        self.fc_weight.add_grad(grad_w.data)
        self.fc_bias.add_grad(grad_b.data)
        grad_weighted = Tensor(grad_flat.data.reshape(cache["weighted_shape"]))
        grad_x, grad_kernel = conv2d_backward(
            grad_weighted, cache["x"], self.weighting_kernel, self.geom
        )
        self.weighting_kernel.add_grad(grad_kernel.data)
        return grad_x

    def params(self, prefix=""):
        return [
            (prefix + "weighting_kernel", self.weighting_kernel),
            (prefix + "fc_weight", self.fc_weight),
            (prefix + "fc_bias", self.fc_bias),
        ]

    def post_step(self):
        pass

    def state_dict(self, prefix=""):
        return {name: t.data for name, t in self.params(prefix)}

    def load_state_dict(self, values, prefix=""):
        _assign(self.weighting_kernel, values, prefix + "weighting_kernel")
        _assign(self.fc_weight, values, prefix + "fc_weight")
        _assign(self.fc_bias, values, prefix + "fc_bias")


class Network:
    """Backbone plus head with explicit forward caches and accumulated grads."""

    def __init__(self, backbone: TinyBackbone, head, description: dict):
        self.backbone = backbone
        self.head = head
        self.description = description

    def forward(self, images, mode: str = "train", update_state=None):
        if update_state is None:
            update_state = mode == "train"
        x = images if isinstance(images, Tensor) else Tensor(images)
        features, bb_caches = self.backbone.forward(x, mode, update_state)
        logits, head_cache = self.head.forward(features, mode, update_state)
        return logits, {"backbone": bb_caches, "head": head_cache}

    def backward(self, grad_logits: Tensor, cache) -> Tensor:
        grad = self.head.backward(grad_logits, cache["head"])
        return self.backbone.backward(grad, cache["backbone"])

    def params(self):
        return self.backbone.params("backbone.") + self.head.params("head.")

    def zero_grads(self):
        for _, tensor in self.params():
            tensor.zero_grad()

    def post_step(self):
        self.head.post_step()

    def state_dict(self):
        out = self.backbone.state_dict("backbone.")
        out.update(self.head.state_dict("head."))
        return out

    def load_state_dict(self, values):
        self.backbone.load_state_dict(values, "backbone.")
        self.head.load_state_dict(values, "head.")


def _assign(tensor: Tensor, values: dict, key: str) -> None:
    tensor.data = _taken(values, key, tensor.shape)


def _taken(values: dict, key: str, shape) -> np.ndarray:
    if key not in values:
        raise DataError(f"checkpoint is missing tensor {key!r}")
    arr = np.asarray(values[key], dtype=np.float32)
    if arr.shape != tuple(shape):
        raise DataError(
            f"checkpoint tensor {key!r} has shape {arr.shape}, expected {tuple(shape)}"
        )
    return arr.copy()


# ---------------------------------------------------------------------------
# Construction and checkpointing.


def build_network(description: dict, seed: int = 0) -> Network:
    """Instantiate a network from its description dict.

    Types: "arm" (backbone + amendment head), "gap" (backbone + global
    average pooling), "sweep" (backbone + stride-1 weighting head).
    """
    kind = description.get("type")
    rng = np.random.default_rng(seed)
    widths = tuple(description.get("backbone_widths", (8, 16, 32)))
    extent = int(description.get("input_extent", 32))
    classes = int(description.get("classes", 0))
    if classes < 2:
        raise ConfigError(f"network description needs classes >= 2, got {classes}")
    backbone = TinyBackbone(rng, extent, widths)
    if kind == "arm":
        cfg = ArmConfig(**description["arm"])
        if (cfg.channels, cfg.height, cfg.width) != (
            backbone.out_channels, backbone.out_extent, backbone.out_extent,
        ):
            raise ConfigError(
                "amendment head expects "
                f"({cfg.channels}, {cfg.height}, {cfg.width}) but the backbone "
                f"produces ({backbone.out_channels}, {backbone.out_extent}, "
                f"{backbone.out_extent})"
            )
        head = ArmHead(rng, cfg)
    elif kind == "gap":
        head = GapHead(rng, backbone.out_channels, classes)
    elif kind == "sweep":
        head = SweepHead(
            rng, backbone.out_channels, backbone.out_extent,
            int(description["kernel"]), classes,
        )
    else:
        raise ConfigError(f"unknown network type {kind!r}")
    return Network(backbone, head, dict(description))


def save_checkpoint(out_dir, network: Network, extra: dict | None = None) -> None:
    """Write every tensor as a .ten file plus a manifest tying them together."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for name, data in network.state_dict().items():
        fname = name.replace(".", "_") + ".ten"
        save_tensor(os.path.join(out_dir, fname), Tensor(data))
        files[name] = fname
    manifest = {
        "format": "arm-lab-checkpoint",
        "version": 1,
        "network": network.description,
        "tensors": files,
        "extra": extra or {},
    }
    with open(os.path.join(out_dir, CHECKPOINT_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir) -> tuple[Network, dict]:
    """Rebuild a network from a checkpoint directory; returns it with the manifest."""
    manifest_path = os.path.join(ckpt_dir, CHECKPOINT_MANIFEST)
    if not os.path.exists(manifest_path):
        raise DataError(f"{ckpt_dir}: missing {CHECKPOINT_MANIFEST}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "arm-lab-checkpoint":
        raise DataError(f"{ckpt_dir}: not a checkpoint manifest")
    network = build_network(manifest["network"], seed=0)
    values = {}
    for name, fname in manifest["tensors"].items():
        values[name] = load_tensor(os.path.join(ckpt_dir, fname)).data
    network.load_state_dict(values)
    return network, manifest
