"""Dense NCHW tensors and the layer primitives used by the ARM network.

Values are stored as 32-bit floats; every reduction (convolution sums,
normalization statistics, losses) accumulates in 64-bit before the result
is rounded back to storage precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GeometryError, KernelTooLargeError, DataError, OracleError

TEN_MAGIC = b"ARMT"
TEN_VERSION = 1


class Tensor:
    """Dense array of rank <= 4 with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim > 4:
            raise GeometryError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad = None
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=np.float32)
            if grad.shape != arr.shape:
                raise GeometryError(
                    f"grad shape {grad.shape} does not match data shape {arr.shape}"
                )
            self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(np.zeros(shape, dtype=np.float32))

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy())
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def add_grad(self, delta) -> None:
        self.ensure_grad()
        self.grad += np.asarray(delta, dtype=np.float32).reshape(self.data.shape)

    def assert_finite(self, label: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise OracleError(f"{label} contains non-finite values")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def save_tensor(path, tensor: Tensor) -> None:
    """Write a tensor in the .ten container (magic, version, rank, extents, f32 payload)."""
    data = tensor.data
    with open(path, "wb") as fh:
        fh.write(TEN_MAGIC)
        fh.write(struct.pack("<BB", TEN_VERSION, data.ndim))
        for extent in data.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(data.astype("<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TEN_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<BB", raw, 4)
    if version != TEN_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if rank > 4:
        raise DataError(f"{path}: rank {rank} exceeds 4")
    offset = 6
    shape = []
    for _ in range(rank):
        (extent,) = struct.unpack_from("<I", raw, offset)
        shape.append(extent)
        offset += 4
    count = int(np.prod(shape)) if shape else 1
    if len(raw) < offset + 4 * count:
        raise DataError(
            f"{path}: truncated payload ({len(raw) - offset} bytes for {count} values)"
        )
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return Tensor(payload.reshape(shape))


@dataclass(frozen=True)
class ConvGeometry:
    """Square-kernel convolution geometry.

    With shared_single_channel=True a single kernel of shape (k, k) is applied
    independently to every input channel, so out_channels == in_channels and
    the parameter count is exactly k*k (no bias).
    """

    kernel: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int
    shared_single_channel: bool = False

    def __post_init__(self):
        if self.kernel < 1:
            raise GeometryError(f"kernel must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise GeometryError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise GeometryError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise GeometryError("channel counts must be >= 1")
        if self.shared_single_channel and self.in_channels != self.out_channels:
            raise GeometryError(
                "shared single-channel convolution keeps the channel count: "
                f"in_channels={self.in_channels} != out_channels={self.out_channels}"
            )

    def out_extent(self, in_extent: int, axis: str = "spatial") -> int:
        out = (in_extent + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise KernelTooLargeError(
                f"kernel {self.kernel} with stride {self.stride} and padding "
                f"{self.padding} does not fit {axis} extent {in_extent}"
            )
        return out

    @property
    def param_count(self) -> int:
        if self.shared_single_channel:
            return self.kernel * self.kernel
        return self.out_channels * self.in_channels * self.kernel * self.kernel

    def kernel_shape(self) -> tuple[int, ...]:
        if self.shared_single_channel:
            return (self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def _check_conv_shapes(x: Tensor, kernel: Tensor, geom: ConvGeometry):
    if x.ndim != 4:
        raise GeometryError(f"conv2d expects NCHW input, got rank {x.ndim}")
    n, c, h, w = x.shape
    if c != geom.in_channels:
        raise GeometryError(
            f"channel dimension mismatch: input has {c}, geometry expects {geom.in_channels}"
        )
    if kernel.shape != geom.kernel_shape():
        raise GeometryError(
            f"kernel shape {kernel.shape} does not match geometry {geom.kernel_shape()}"
        )
    out_h = geom.out_extent(h, "height")
    out_w = geom.out_extent(w, "width")
    return n, c, h, w, out_h, out_w


def _pad_input(data: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (p, p), (p, p)))


def _window_view(padded: np.ndarray, k: int, s: int, out_h: int, out_w: int) -> np.ndarray:
    # (N, C, out_h, out_w, k, k) strided view, no copy
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s][:, :, :out_h, :out_w]


def conv2d_forward(x: Tensor, kernel: Tensor, geom: ConvGeometry) -> Tensor:
    """Cross-correlate x with the kernel; padding logically extends x with zeros."""
    n, c, h, w, out_h, out_w = _check_conv_shapes(x, kernel, geom)
    padded = _pad_input(x.data, geom.padding)
    win = _window_view(padded, geom.kernel, geom.stride, out_h, out_w)
    k2 = geom.kernel * geom.kernel
    if geom.shared_single_channel:
        cols = win.reshape(n * c * out_h * out_w, k2).astype(np.float64)
        out = cols @ kernel.data.reshape(k2).astype(np.float64)
        return Tensor(out.reshape(n, c, out_h, out_w).astype(np.float32))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * k2)
    kmat = kernel.data.reshape(geom.out_channels, c * k2).astype(np.float64)
    out = cols.astype(np.float64) @ kmat.T
    out = out.reshape(n, out_h, out_w, geom.out_channels).transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(out.astype(np.float32)))


def conv2d_forward_naive(x: Tensor, kernel: Tensor, geom: ConvGeometry) -> Tensor:
    """Explicit window iteration; must agree with conv2d_forward to 1e-6."""
    n, c, h, w, out_h, out_w = _check_conv_shapes(x, kernel, geom)
    padded = _pad_input(x.data, geom.padding).astype(np.float64)
    k, s = geom.kernel, geom.stride
    if geom.shared_single_channel:
        kern = kernel.data.astype(np.float64)
        out = np.zeros((n, c, out_h, out_w))
        for i in range(out_h):
            for j in range(out_w):
                window = padded[:, :, i * s : i * s + k, j * s : j * s + k]
                out[:, :, i, j] = np.sum(window * kern, axis=(2, 3))
        return Tensor(out.astype(np.float32))
    kern = kernel.data.astype(np.float64)
    out = np.zeros((n, geom.out_channels, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            window = padded[:, :, i * s : i * s + k, j * s : j * s + k]
            out[:, :, i, j] = np.einsum("ncyx,ocyx->no", window, kern)
    return Tensor(out.astype(np.float32))


def conv2d_backward(
    grad_out: Tensor, x: Tensor, kernel: Tensor, geom: ConvGeometry
) -> tuple[Tensor, Tensor]:
    """Gradients of sum(grad_out * conv2d_forward(x)) w.r.t. x and the kernel."""
    n, c, h, w, out_h, out_w = _check_conv_shapes(x, kernel, geom)
    if grad_out.shape != (n, geom.out_channels, out_h, out_w):
        raise GeometryError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, geom.out_channels, out_h, out_w)}"
        )
    k, s, p = geom.kernel, geom.stride, geom.padding
    padded = _pad_input(x.data, p)
    win = _window_view(padded, k, s, out_h, out_w)
    go = grad_out.data.astype(np.float64)
    if geom.shared_single_channel:
        grad_kernel = np.einsum("ncij,ncijyx->yx", go, win, dtype=np.float64)
        grad_win = go[:, :, :, :, None, None] * kernel.data.astype(np.float64)
    else:
        grad_kernel = np.einsum("noij,ncijyx->ocyx", go, win, dtype=np.float64)
        grad_win = np.einsum("noij,ocyx->ncijyx", go, kernel.data.astype(np.float64))
    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for ky in range(k):
        for kx in range(k):
            grad_padded[:, :, ky : ky + s * out_h : s, kx : kx + s * out_w : s] += grad_win[
                :, :, :, :, ky, kx
            ]
    grad_x = grad_padded[:, :, p : p + h, p : p + w] if p else grad_padded
    return Tensor(grad_x.astype(np.float32)), Tensor(grad_kernel.astype(np.float32))


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return Tensor(np.where(x.data > 0.0, grad_out.data, 0.0))


@dataclass
class RunningStats:
    """Per-channel running mean/variance updated by train-mode batchnorm."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    scale: np.ndarray
    batch_coupled: bool = True


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running: RunningStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> tuple[Tensor, BatchNormCache]:
    """Per-channel standardization followed by the learned affine map.

    Train mode normalizes with batch statistics (biased variance) and folds
    them into the running estimates; eval mode uses the running estimates.
    """
    if x.ndim != 4:
        raise GeometryError(f"batchnorm expects NCHW input, got rank {x.ndim}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise GeometryError(
            f"scale/shift must have shape ({c},), got {scale.shape} and {shift.shape}"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    data = x.data.astype(np.float64)
    if mode == "train":
        mean = data.mean(axis=(0, 2, 3))
        var = data.var(axis=(0, 2, 3))
        if update_running:
            running.mean = ((1.0 - momentum) * running.mean + momentum * mean).astype(np.float32)
            running.var = ((1.0 - momentum) * running.var + momentum * var).astype(np.float32)
    else:
        mean = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale.data.astype(np.float64)[None, :, None, None]
    out += shift.data.astype(np.float64)[None, :, None, None]
    cache = BatchNormCache(
        xhat=xhat,
        inv_std=inv_std,
        scale=scale.data.astype(np.float64),
        batch_coupled=mode == "train",
    )
    return Tensor(out.astype(np.float32)), cache


def batchnorm_backward(
    grad_out: Tensor, cache: BatchNormCache
) -> tuple[Tensor, Tensor, Tensor]:
    go = grad_out.data.astype(np.float64)
    xhat = cache.xhat
    grad_scale = np.sum(go * xhat, axis=(0, 2, 3))
    grad_shift = np.sum(go, axis=(0, 2, 3))
    dxhat = go * cache.scale[None, :, None, None]
    if cache.batch_coupled:
        grad_x = (
            dxhat
            - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        ) * cache.inv_std[None, :, None, None]
    else:
        grad_x = dxhat * cache.inv_std[None, :, None, None]
    return (
        Tensor(grad_x.astype(np.float32)),
        Tensor(grad_scale.astype(np.float32)),
        Tensor(grad_shift.astype(np.float32)),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x (N, F) times weight (K, F) transposed, plus bias (K,)."""
    if x.ndim != 2:
        raise GeometryError(f"linear expects (N, features) input, got rank {x.ndim}")
    n, f = x.shape
    if weight.ndim != 2 or weight.shape[1] != f:
        raise GeometryError(
            f"weight shape {weight.shape} incompatible with feature length {f}"
        )
    k = weight.shape[0]
    if bias.shape != (k,):
        raise GeometryError(f"bias shape {bias.shape} must be ({k},)")
    out = x.data.astype(np.float64) @ weight.data.astype(np.float64).T
    out += bias.data.astype(np.float64)
    return Tensor(out.astype(np.float32))


def linear_backward(
    grad_out: Tensor, x: Tensor, weight: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    go = grad_out.data.astype(np.float64)
    grad_x = go @ weight.data.astype(np.float64)
    grad_w = go.T @ x.data.astype(np.float64)
    grad_b = go.sum(axis=0)
    return (
        Tensor(grad_x.astype(np.float32)),
        Tensor(grad_w.astype(np.float32)),
        Tensor(grad_b.astype(np.float32)),
    )


def channel_mean(x: Tensor) -> Tensor:
    """Arithmetic mean over the channel axis: (N, C, H, W) -> (N, H, W)."""
    if x.ndim != 4:
        raise GeometryError(f"channel_mean expects NCHW input, got rank {x.ndim}")
    return Tensor(x.data.mean(axis=1, dtype=np.float64).astype(np.float32))


def channel_mean_backward(grad_out: Tensor, channels: int) -> Tensor:
    go = grad_out.data.astype(np.float64) / channels
    return Tensor(np.broadcast_to(go[:, None], (go.shape[0], channels) + go.shape[1:]).astype(np.float32))


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean negative log softmax at the label, with the analytic logit gradient.

    Stabilized by max subtraction; loss and gradient are accumulated in 64-bit.
    """
    if logits.ndim != 2:
        raise GeometryError(f"logits must be (N, K), got rank {logits.ndim}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise GeometryError(f"labels shape {labels.shape} must be ({n},)")
    for idx, lab in enumerate(labels):
        if not 0 <= int(lab) < k:
            raise DataError(f"label {int(lab)} out of range [0, {k}) at sample {idx}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, Tensor(grad.astype(np.float32))


def finite_diff_grad(
    f: Callable[[Tensor], float], x: Tensor, step: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Divides by the realized float32 step rather than the nominal one so the
    storage rounding of x +/- h does not bias the quotient. Returns float64.
    """
    if step <= 0:
        raise OracleError(f"step must be positive, got {step}")
    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    probe = base.copy()
    probe_flat = probe.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi = np.float32(orig + step)
        lo = np.float32(orig - step)
        probe_flat[i] = hi
        f_hi = float(f(Tensor(probe)))
        probe_flat[i] = lo
        f_lo = float(f(Tensor(probe)))
        probe_flat[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        denom = float(hi) - float(lo)
        grad[i] = (f_hi - f_lo) / denom
    return grad.reshape(x.shape)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform init for conv kernels and linear weights."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
