"""
Dense tensor primitives used to compose ResNet-18.

Tensors are plain `numpy.ndarray` objects of rank at most 4, laid out as
batch x channels x height x width. Every forward primitive returns `(output, cache)`
and the matching backward takes `(grad_out, cache)`.

Reductions (means, variances, bias gradients, pooled sums) accumulate in 64-bit even
when the tensors are 32-bit. All primitives are pure apart from `batchnorm_forward`
in training mode, which updates the running statistics held by its `BatchNormState`.
"""

from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError

Precision = Literal["float32", "float64"]
Mode = Literal["training", "inference"]

DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
}
MAX_RANK = 4


def dtype_for(precision: Precision) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"Unsupported precision `{precision}`. Choose one of {sorted(DTYPES)}")


def as_tensor(values, precision: Precision = "float32") -> np.ndarray:
    '''
    Returns a contiguous tensor of the requested precision.

    Args:
        values: array-like data.
        precision (str): "float32" (default) or "float64" for gradient checking.
    '''
    tensor = np.ascontiguousarray(values, dtype=dtype_for(precision))
    if tensor.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank {tensor.ndim} exceeds {MAX_RANK}")
    if 0 in tensor.shape:
        raise ShapeError(f"tensor dimensions must be positive, got {tensor.shape}")
    return tensor


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    '''Raises ValueError when `x` holds NaN or Inf values.'''
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {where}")
    return x


def _check_mode(mode: str) -> None:
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be 'training' or 'inference', got `{mode}`")


def _check_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """
    #### Geometry of a 2D convolution.

    @param int `in_channels`, `out_channels`: channel counts.
    @param int | tuple `kernel`: kernel height/width.
    @param int `stride`: step between windows.
    @param int `padding`: zero border added on every side.
    """
    in_channels: int
    out_channels: int
    kernel: int | Tuple[int, int]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        kernel = (self.kernel, self.kernel) if isinstance(self.kernel, (int, np.integer)) else tuple(self.kernel)
        object.__setattr__(self, "kernel", (int(kernel[0]), int(kernel[1])))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if min(self.kernel) < 1:
            raise ShapeError("kernel dimensions must be positive")
        if self.stride < 1:
            raise ShapeError("stride must be positive")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        out_h = (height + 2 * self.padding - kh) // self.stride + 1
        out_w = (width + 2 * self.padding - kw) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"input {height}x{width} is too small for kernel {kh}x{kw} "
                f"with padding {self.padding}"
            )
        return out_h, out_w


@dataclass
class ConvCache:
    input: np.ndarray
    weights: np.ndarray
    spec: ConvSpec
    has_bias: bool


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    width = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, width, mode="constant", constant_values=value)


def _windows(padded: np.ndarray, kernel: Tuple[int, int], stride: int, out_size: Tuple[int, int]) -> np.ndarray:
    '''Strided view N x C x Ho x Wo x kh x kw over a padded input.'''
    view = sliding_window_view(padded, kernel, axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :out_size[0], :out_size[1]]


def _im2col(x: np.ndarray, spec: ConvSpec, out_size: Tuple[int, int]) -> np.ndarray:
    n, c = x.shape[:2]
    windows = _windows(_pad(x, spec.padding), spec.kernel, spec.stride, out_size)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_size[0] * out_size[1], c * spec.kernel[0] * spec.kernel[1])


def conv2d_forward(
        input: np.ndarray,
        weights: np.ndarray,
        bias: np.ndarray | None,
        spec: ConvSpec
    ) -> Tuple[np.ndarray, ConvCache]:
    '''
    Cross-correlation (no kernel flip) with zero padding.

    Args:
        input: N x C_in x H x W tensor.
        weights: C_out x C_in x kh x kw kernel.
        bias: C_out values or None.
        spec (ConvSpec): geometry.

    Returns the N x C_out x Ho x Wo output and the cache used by `conv2d_backward`.
    '''
    _check_rank(input, 4, "conv2d input")
    if input.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input channels: expected {spec.in_channels}, got {input.shape[1]}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv2d weights: expected shape {spec.weight_shape}, got {weights.shape}")
    if bias is not None and np.shape(bias) != (spec.out_channels,):
        raise ShapeError(f"conv2d bias: expected length {spec.out_channels}, got shape {np.shape(bias)}")

    n = input.shape[0]
    out_h, out_w = spec.output_size(*input.shape[2:])
    cols = _im2col(input, spec, (out_h, out_w))
    out = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        out = out + np.asarray(bias, dtype=out.dtype)
    out = np.ascontiguousarray(out.reshape(n, out_h, out_w, spec.out_channels).transpose(0, 3, 1, 2))
    return out, ConvCache(input=input, weights=weights, spec=spec, has_bias=bias is not None)


def conv2d_backward(grad_out: np.ndarray, cache: ConvCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''
    Gradients of <grad_out, conv2d_forward(...)> with respect to input, weights and bias.

    Returns `(grad_input, grad_weights, grad_bias)`.
    '''
    x, w, spec = cache.input, cache.weights, cache.spec
    n, c, h, width = x.shape
    out_h, out_w = spec.output_size(h, width)
    expected = (n, spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d grad_out: expected shape {expected}, got {grad_out.shape}")

    kh, kw = spec.kernel
    s, p = spec.stride, spec.padding
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    cols = _im2col(x, spec, (out_h, out_w))
    grad_w = (g2.T @ cols).reshape(w.shape).astype(w.dtype, copy=False)
    grad_b = g2.sum(axis=0, dtype=np.float64).astype(w.dtype)

    grad_cols = (g2 @ w.reshape(spec.out_channels, -1)).reshape(n, out_h, out_w, c, kh, kw)
    grad_padded = np.zeros((n, c, h + 2 * p, width + 2 * p), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = np.ascontiguousarray(grad_padded[:, :, p:p + h, p:p + width])
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """
    #### Per-channel batch-norm parameters and running statistics.

    Running statistics are updated in place during training-mode forward passes:
    running = (1 - momentum) * running + momentum * batch, using the unbiased batch
    variance for `running_var` and the biased one for normalization.
    """
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        channels = np.shape(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if np.shape(getattr(self, name)) != channels:
                raise ShapeError(f"batch-norm {name}: expected shape {channels}, got {np.shape(getattr(self, name))}")
        if not 0 < self.momentum < 1:
            raise ValueError("batch-norm momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("batch-norm running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, precision: Precision = "float32", **kwargs) -> "BatchNormState":
        dtype = dtype_for(precision)
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kwargs,
        )

    @property
    def channels(self) -> int:
        return int(np.shape(self.gamma)[0])


@dataclass
class BatchNormCache:
    normalized: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: Mode
    dtype: np.dtype


def _channel_axes(x: np.ndarray) -> Tuple[int, ...]:
    return tuple(axis for axis in range(x.ndim) if axis != 1)


def _per_channel(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: Mode) -> Tuple[np.ndarray, BatchNormCache]:
    '''
    Normalizes `x` per channel, then scales by gamma and shifts by beta.

    Training mode uses batch statistics and updates the running statistics of `state`;
    inference mode uses the running statistics.
    '''
    _check_mode(mode)
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch-norm input: expected rank 2 or 4, got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise ShapeError(f"batch-norm input channels: expected {state.channels}, got {x.shape[1]}")

    axes = _channel_axes(x)
    x64 = x.astype(np.float64)
    if mode == "training":
        if x.shape[0] < 2:
            raise ShapeError("batch-norm training mode requires a batch size of at least 2")
        count = x.size // x.shape[1]
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
        unbiased = var * count / (count - 1)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean.astype(np.float64) + m * mean
        state.running_var[...] = (1 - m) * state.running_var.astype(np.float64) + m * unbiased
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    normalized = (x64 - _per_channel(mean, x.ndim)) * _per_channel(inv_std, x.ndim)
    gamma = np.asarray(state.gamma, dtype=np.float64)
    out = _per_channel(gamma, x.ndim) * normalized + _per_channel(np.asarray(state.beta, dtype=np.float64), x.ndim)
    cache = BatchNormCache(normalized=normalized, inv_std=inv_std, gamma=gamma, mode=mode, dtype=x.dtype)
    return out.astype(x.dtype), cache


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''
    Chain rule through the batch statistics (training) or the fixed affine map (inference).

    Returns `(grad_input, grad_gamma, grad_beta)`.
    '''
    if grad_out.shape != cache.normalized.shape:
        raise ShapeError(f"batch-norm grad_out: expected shape {cache.normalized.shape}, got {grad_out.shape}")
    axes = _channel_axes(grad_out)
    ndim = grad_out.ndim
    g = grad_out.astype(np.float64)
    xhat = cache.normalized

    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * xhat).sum(axis=axes)
    scale = _per_channel(cache.gamma * cache.inv_std, ndim)
    if cache.mode == "training":
        count = grad_out.size // grad_out.shape[1]
        mean_g = _per_channel(grad_beta / count, ndim)
        mean_gx = _per_channel(grad_gamma / count, ndim)
        grad_x = scale * (g - mean_g - xhat * mean_gx)
    else:
        grad_x = scale * g
    dtype = cache.dtype
    return grad_x.astype(dtype), grad_gamma.astype(dtype), grad_beta.astype(dtype)


# ---------------------------------------------------------------------------
# Activation and pooling
# ---------------------------------------------------------------------------

def relu(input: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    '''Elementwise max(0, x). The cache is the boolean mask of strictly positive inputs.'''
    mask = input > 0
    return np.where(mask, input, np.zeros((), dtype=input.dtype)), mask


def relu_backward(grad_out: np.ndarray, cache: np.ndarray) -> np.ndarray:
    '''Masks gradients where the input was <= 0 (the derivative at exactly 0 is 0).'''
    if grad_out.shape != cache.shape:
        raise ShapeError(f"relu grad_out: expected shape {cache.shape}, got {grad_out.shape}")
    return np.where(cache, grad_out, np.zeros((), dtype=grad_out.dtype))


@dataclass
class PoolCache:
    input_shape: Tuple[int, ...]
    argmax: np.ndarray
    kernel: int
    stride: int
    padding: int


def maxpool2d(input: np.ndarray, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tuple[np.ndarray, PoolCache]:
    '''
    Max pooling with -inf padding so padded cells never win. Ties go to the lowest
    flattened index inside the window.
    '''
    _check_rank(input, 4, "maxpool input")
    if padding * 2 > kernel:
        raise ShapeError(f"maxpool padding {padding} must be at most half the kernel {kernel}")
    n, c, h, w = input.shape
    out_h = (h + 2 * padding - kernel) // stride + 1
    out_w = (w + 2 * padding - kernel) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"maxpool input {h}x{w} is too small for kernel {kernel}")

    padded = _pad(input, padding, value=-np.inf)
    windows = _windows(padded, (kernel, kernel), stride, (out_h, out_w)).reshape(n, c, out_h, out_w, kernel * kernel)
    argmax = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolCache(input.shape, argmax, kernel, stride, padding)


def maxpool2d_backward(grad_out: np.ndarray, cache: PoolCache) -> np.ndarray:
    '''Scatters each output gradient to the input cell that won the forward max.'''
    n, c, h, w = cache.input_shape
    if grad_out.shape != cache.argmax.shape:
        raise ShapeError(f"maxpool grad_out: expected shape {cache.argmax.shape}, got {grad_out.shape}")
    out_h, out_w = grad_out.shape[2:]
    p = cache.padding
    rows = (np.arange(out_h) * cache.stride)[None, None, :, None] + cache.argmax // cache.kernel
    cols = (np.arange(out_w) * cache.stride)[None, None, None, :] + cache.argmax % cache.kernel

    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    batch_idx = np.arange(n)[:, None, None, None]
    chan_idx = np.arange(c)[None, :, None, None]
    np.add.at(grad_padded, (batch_idx, chan_idx, rows, cols), grad_out)
    return np.ascontiguousarray(grad_padded[:, :, p:p + h, p:p + w])


def global_avg_pool(input: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    '''Per-(batch, channel) spatial mean; output N x C x 1 x 1.'''
    _check_rank(input, 4, "global_avg_pool input")
    out = input.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(input.dtype)
    return out, input.shape


def global_avg_pool_backward(grad_out: np.ndarray, cache: Tuple[int, ...]) -> np.ndarray:
    '''Spreads each gradient uniformly over the H*W cells it averaged.'''
    n, c, h, w = cache
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"global_avg_pool grad_out: expected shape {(n, c, 1, 1)}, got {grad_out.shape}")
    return np.broadcast_to(grad_out / (h * w), cache).copy()


# ---------------------------------------------------------------------------
# Dense head
# ---------------------------------------------------------------------------

@dataclass
class LinearCache:
    input: np.ndarray
    weights: np.ndarray


def linear_forward(input: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, LinearCache]:
    '''`input` (N x F) @ `weights` (F x K) + `bias` (K).'''
    _check_rank(input, 2, "linear input")
    _check_rank(weights, 2, "linear weights")
    if input.shape[1] != weights.shape[0]:
        raise ShapeError(f"linear features: input has {input.shape[1]}, weights expect {weights.shape[0]}")
    if np.shape(bias) != (weights.shape[1],):
        raise ShapeError(f"linear bias: expected length {weights.shape[1]}, got shape {np.shape(bias)}")
    out = input @ weights + np.asarray(bias, dtype=input.dtype)
    return out, LinearCache(input=input, weights=weights)


def linear_backward(grad_out: np.ndarray, cache: LinearCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''Returns `(grad_input, grad_weights, grad_bias)`.'''
    expected = (cache.input.shape[0], cache.weights.shape[1])
    if grad_out.shape != expected:
        raise ShapeError(f"linear grad_out: expected shape {expected}, got {grad_out.shape}")
    grad_x = grad_out @ cache.weights.T
    grad_w = cache.input.T @ grad_out
    grad_b = grad_out.sum(axis=0, dtype=np.float64).astype(grad_out.dtype)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Probabilities
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    '''Row-wise log-probabilities, computed in 64-bit with max subtraction.'''
    _check_rank(logits, 2, "logits")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    '''Row-wise probabilities on the simplex, in the dtype of `logits`.'''
    _check_rank(logits, 2, "logits")
    z = logits.astype(np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype)
