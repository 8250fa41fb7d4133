"""
ResNet-18 assembled from the tensor primitives: a 7x7 stride-2 stem, four stages of
residual blocks, global average pooling and a linear head over the histologic classes.

Parameters live in a `ModelParams` mapping keyed by canonical layer names::

    stem.conv.weight
    stem.bn.{gamma,beta,running_mean,running_var}
    stage{S}.block{B}.conv1.weight            stage{S}.block{B}.bn1.{...}
    stage{S}.block{B}.conv2.weight            stage{S}.block{B}.bn2.{...}
    stage{S}.block{B}.shortcut.conv.weight    stage{S}.block{B}.shortcut.bn.{...}
    head.weight (features x classes)          head.bias

with S in 1..4 and B counting from 1. The same names are used by the checkpoint format.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ShapeError
from .utils import derive_rng

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5
BN_SUFFIXES = ("gamma", "beta", "running_mean", "running_var")
RUNNING_SUFFIXES = ("running_mean", "running_var")
STEM_KERNEL = 7


@dataclass
class ArchitectureConfig:
    """
    #### ResNet-18 geometry.

    @param int `input_size`: side length of the square input patch. With the default 512 the
    stem convolution yields 256x256 feature maps.
    @param int `input_channels`: image channels (3 for RGB).
    @param int `base_channels`: channels of the first stage; doubled at every later stage.
    @param tuple `blocks_per_stage`: residual blocks in each of the four stages.
    @param int `num_classes`: width of the classification head.
    @param bool `include_stem_maxpool`: apply the 3x3 stride-2 max pool after the stem.
    """
    input_size: int = 512
    input_channels: int = 3
    base_channels: int = 64
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2)
    num_classes: int = 6
    include_stem_maxpool: bool = True

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        self.validate()

    @property
    def downsample_factor(self) -> int:
        # stem conv, optional max pool and three stride-2 stage boundaries
        return 2 ** (1 + int(self.include_stem_maxpool) + len(self.blocks_per_stage) - 1)

    @property
    def stage_channels(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(len(self.blocks_per_stage))]

    @property
    def feature_width(self) -> int:
        return self.stage_channels[-1]

    def validate(self) -> None:
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ConfigError("`blocks_per_stage` must list four positive block counts")
        if self.input_channels < 1 or self.base_channels < 1:
            raise ConfigError("`input_channels` and `base_channels` must be positive")
        if self.num_classes < 2:
            raise ConfigError("`num_classes` must be at least 2")
        if self.input_size < 1 or self.input_size % self.downsample_factor:
            raise ConfigError(
                f"`input_size` {self.input_size} must be a positive multiple of {self.downsample_factor}"
                f" (include_stem_maxpool={self.include_stem_maxpool})"
            )

    def to_dict(self) -> Dict[str, str]:
        values = asdict(self)
        values["blocks_per_stage"] = ",".join(str(b) for b in self.blocks_per_stage)
        return {key: str(value).lower() if isinstance(value, bool) else str(value) for key, value in values.items()}

    @classmethod
    def from_dict(cls, values: Dict[str, str]) -> "ArchitectureConfig":
        try:
            return cls(
                input_size=int(values["input_size"]),
                input_channels=int(values["input_channels"]),
                base_channels=int(values["base_channels"]),
                blocks_per_stage=tuple(int(b) for b in values["blocks_per_stage"].split(",")),
                num_classes=int(values["num_classes"]),
                include_stem_maxpool=values["include_stem_maxpool"].lower() == "true",
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"Invalid architecture description: {e}")


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError("residual block stride must be 1 or 2")

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


def block_specs(config: ArchitectureConfig) -> Iterator[Tuple[str, ResidualBlockSpec]]:
    '''Yields `(prefix, spec)` for every residual block in forward order.'''
    in_channels = config.base_channels
    for stage, (blocks, channels) in enumerate(zip(config.blocks_per_stage, config.stage_channels), start=1):
        for block in range(1, blocks + 1):
            stride = 2 if stage > 1 and block == 1 else 1
            yield f"stage{stage}.block{block}", ResidualBlockSpec(in_channels, channels, stride)
            in_channels = channels


def parameter_shapes(config: ArchitectureConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    '''Canonical name -> tensor shape, in forward order.'''
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()

    def add_bn(prefix: str, channels: int) -> None:
        for suffix in BN_SUFFIXES:
            shapes[f"{prefix}.{suffix}"] = (channels,)

    base = config.base_channels
    shapes["stem.conv.weight"] = (base, config.input_channels, STEM_KERNEL, STEM_KERNEL)
    add_bn("stem.bn", base)
    for prefix, spec in block_specs(config):
        shapes[f"{prefix}.conv1.weight"] = (spec.out_channels, spec.in_channels, 3, 3)
        add_bn(f"{prefix}.bn1", spec.out_channels)
        shapes[f"{prefix}.conv2.weight"] = (spec.out_channels, spec.out_channels, 3, 3)
        add_bn(f"{prefix}.bn2", spec.out_channels)
        if spec.has_projection:
            shapes[f"{prefix}.shortcut.conv.weight"] = (spec.out_channels, spec.in_channels, 1, 1)
            add_bn(f"{prefix}.shortcut.bn", spec.out_channels)
    shapes["head.weight"] = (config.feature_width, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def layer_names(config: ArchitectureConfig) -> List[str]:
    return list(parameter_shapes(config))


def is_trainable(name: str) -> bool:
    return not name.endswith(RUNNING_SUFFIXES)


class ModelParams:
    """
    #### Ordered mapping of canonical layer names to parameter tensors.

    Includes batch-norm running statistics, which are not trainable and have no gradient.
    The name set always equals the one generated by the architecture config.
    """

    def __init__(self, config: ArchitectureConfig, tensors: "OrderedDict[str, np.ndarray]") -> None:
        shapes = parameter_shapes(config)
        if list(tensors) != list(shapes):
            missing = sorted(set(shapes) - set(tensors))
            unexpected = sorted(set(tensors) - set(shapes))
            raise ShapeError(f"parameter names do not match the architecture (missing {missing[:3]}, unexpected {unexpected[:3]})")
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tuple(tensors[name].shape)}")
        self.config = config
        self._tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        if value.shape != self._tensors[name].shape:
            raise ShapeError(f"{name}: expected shape {self._tensors[name].shape}, got {value.shape}")
        self._tensors[name] = value

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def keys(self):
        return self._tensors.keys()

    @property
    def dtype(self) -> np.dtype:
        return self._tensors["head.weight"].dtype

    def parameter_names(self) -> List[str]:
        return list(self._tensors)

    def trainable_names(self) -> List[str]:
        return [name for name in self._tensors if is_trainable(name)]

    def parameter_count(self) -> int:
        '''Number of trainable scalars (running statistics excluded).'''
        return int(sum(self._tensors[name].size for name in self.trainable_names()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((name, value.copy()) for name, value in self._tensors.items()))

    def astype(self, precision: T.Precision) -> "ModelParams":
        dtype = T.dtype_for(precision)
        return ModelParams(self.config, OrderedDict((name, value.astype(dtype)) for name, value in self._tensors.items()))

    def assert_finite(self) -> None:
        for name, value in self._tensors.items():
            T.check_finite(value, name)

    def bn_state(self, prefix: str) -> T.BatchNormState:
        return T.BatchNormState(
            gamma=self[f"{prefix}.gamma"],
            beta=self[f"{prefix}.beta"],
            running_mean=self[f"{prefix}.running_mean"],
            running_var=self[f"{prefix}.running_var"],
            momentum=BN_MOMENTUM,
            epsilon=BN_EPSILON,
        )


def build(config: ArchitectureConfig, seed: int, precision: T.Precision = "float32") -> ModelParams:
    '''
    Creates freshly initialised parameters.

    Conv and head weights are drawn from a zero-mean normal with std sqrt(2 / fan_in);
    gamma=1, beta=0, running_mean=0, running_var=1, head bias 0. Deterministic for a fixed seed.
    '''
    config.validate()
    dtype = T.dtype_for(precision)
    rng = derive_rng(seed, "init")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            values = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith((".gamma", ".running_var")):
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        tensors[name] = values.astype(dtype)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# Residual block
# ---------------------------------------------------------------------------

@dataclass
class BlockCache:
    spec: ResidualBlockSpec
    conv1: T.ConvCache
    bn1: T.BatchNormCache
    relu1: np.ndarray
    conv2: T.ConvCache
    bn2: T.BatchNormCache
    out_relu: np.ndarray
    shortcut_conv: T.ConvCache | None = None
    shortcut_bn: T.BatchNormCache | None = None


def _conv_spec(weights: np.ndarray, stride: int, padding: int) -> T.ConvSpec:
    out_channels, in_channels, kh, kw = weights.shape
    return T.ConvSpec(in_channels, out_channels, (kh, kw), stride, padding)


def residual_block_forward(
        x: np.ndarray,
        params: ModelParams,
        prefix: str,
        spec: ResidualBlockSpec,
        mode: T.Mode
    ) -> Tuple[np.ndarray, BlockCache]:
    '''
    conv3x3 -> BN -> ReLU -> conv3x3 -> BN, added to the identity or to a 1x1 conv + BN
    projection, then ReLU.
    '''
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"{prefix} input channels: expected {spec.in_channels}, got {x.shape[1]}")
    w1 = params[f"{prefix}.conv1.weight"]
    w2 = params[f"{prefix}.conv2.weight"]
    h, conv1 = T.conv2d_forward(x, w1, None, _conv_spec(w1, spec.stride, 1))
    h, bn1 = T.batchnorm_forward(h, params.bn_state(f"{prefix}.bn1"), mode)
    h, relu1 = T.relu(h)
    h, conv2 = T.conv2d_forward(h, w2, None, _conv_spec(w2, 1, 1))
    h, bn2 = T.batchnorm_forward(h, params.bn_state(f"{prefix}.bn2"), mode)

    shortcut_conv = shortcut_bn = None
    if spec.has_projection:
        ws = params[f"{prefix}.shortcut.conv.weight"]
        shortcut, shortcut_conv = T.conv2d_forward(x, ws, None, _conv_spec(ws, spec.stride, 0))
        shortcut, shortcut_bn = T.batchnorm_forward(shortcut, params.bn_state(f"{prefix}.shortcut.bn"), mode)
    else:
        shortcut = x
    if shortcut.shape != h.shape:
        raise ShapeError(f"{prefix}: residual branch {h.shape} and shortcut {shortcut.shape} differ")

    out, out_relu = T.relu(h + shortcut)
    cache = BlockCache(spec, conv1, bn1, relu1, conv2, bn2, out_relu, shortcut_conv, shortcut_bn)
    return out, cache


def residual_block_backward(grad_out: np.ndarray, cache: BlockCache, prefix: str) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    '''Returns the gradient with respect to the block input and the block's parameter gradients.'''
    grads: Dict[str, np.ndarray] = {}
    g = T.relu_backward(grad_out, cache.out_relu)

    gb, grads[f"{prefix}.bn2.gamma"], grads[f"{prefix}.bn2.beta"] = T.batchnorm_backward(g, cache.bn2)
    gb, grads[f"{prefix}.conv2.weight"], _ = T.conv2d_backward(gb, cache.conv2)
    gb = T.relu_backward(gb, cache.relu1)
    gb, grads[f"{prefix}.bn1.gamma"], grads[f"{prefix}.bn1.beta"] = T.batchnorm_backward(gb, cache.bn1)
    grad_x, grads[f"{prefix}.conv1.weight"], _ = T.conv2d_backward(gb, cache.conv1)

    if cache.spec.has_projection:
        gs, grads[f"{prefix}.shortcut.bn.gamma"], grads[f"{prefix}.shortcut.bn.beta"] = T.batchnorm_backward(g, cache.shortcut_bn)
        gs, grads[f"{prefix}.shortcut.conv.weight"], _ = T.conv2d_backward(gs, cache.shortcut_conv)
        grad_x = grad_x + gs
    else:
        grad_x = grad_x + g
    return grad_x, grads


# ---------------------------------------------------------------------------
# Whole network
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    config: ArchitectureConfig
    stem_conv: T.ConvCache
    stem_bn: T.BatchNormCache
    stem_relu: np.ndarray
    stem_pool: T.PoolCache | None
    blocks: List[Tuple[str, BlockCache]] = field(default_factory=list)
    gap: Tuple[int, ...] = ()
    head: T.LinearCache | None = None


def check_input(config: ArchitectureConfig, batch: np.ndarray) -> None:
    expected = (config.input_channels, config.input_size, config.input_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"input batch: expected N x {expected[0]} x {expected[1]} x {expected[2]}, got {batch.shape}")


def forward(params: ModelParams, batch: np.ndarray, mode: T.Mode) -> Tuple[np.ndarray, ForwardCache | None]:
    '''
    Computes N x num_classes logits.

    The cache needed by `backward` is returned in training mode; inference mode returns None
    and leaves `params` untouched.
    '''
    config = params.config
    check_input(config, batch)
    batch = batch.astype(params.dtype, copy=False)

    w = params["stem.conv.weight"]
    h, stem_conv = T.conv2d_forward(batch, w, None, _conv_spec(w, 2, STEM_KERNEL // 2))
    h, stem_bn = T.batchnorm_forward(h, params.bn_state("stem.bn"), mode)
    h, stem_relu = T.relu(h)
    stem_pool = None
    if config.include_stem_maxpool:
        h, stem_pool = T.maxpool2d(h, kernel=3, stride=2, padding=1)

    cache = ForwardCache(config, stem_conv, stem_bn, stem_relu, stem_pool)
    for prefix, spec in block_specs(config):
        h, block_cache = residual_block_forward(h, params, prefix, spec, mode)
        cache.blocks.append((prefix, block_cache))

    pooled, cache.gap = T.global_avg_pool(h)
    logits, cache.head = T.linear_forward(pooled.reshape(pooled.shape[0], -1), params["head.weight"], params["head.bias"])
    return logits, (cache if mode == "training" else None)


def backward(cache: ForwardCache, grad_logits: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    '''Gradients for every trainable parameter, ordered like the parameter schema.'''
    if cache is None:
        raise ValueError("backward requires the cache of a training-mode forward pass")
    grads: Dict[str, np.ndarray] = {}
    g, grads["head.weight"], grads["head.bias"] = T.linear_backward(grad_logits, cache.head)
    g = T.global_avg_pool_backward(g.reshape(g.shape + (1, 1)), cache.gap)
    for prefix, block_cache in reversed(cache.blocks):
        g, block_grads = residual_block_backward(g, block_cache, prefix)
        grads.update(block_grads)
    if cache.stem_pool is not None:
        g = T.maxpool2d_backward(g, cache.stem_pool)
    g = T.relu_backward(g, cache.stem_relu)
    g, grads["stem.bn.gamma"], grads["stem.bn.beta"] = T.batchnorm_backward(g, cache.stem_bn)
    _, grads["stem.conv.weight"], _ = T.conv2d_backward(g, cache.stem_conv)

    ordered = OrderedDict((name, grads[name]) for name in layer_names(cache.config) if is_trainable(name))
    return ordered


def predict_proba(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    '''Inference-mode forward followed by softmax.'''
    logits, _ = forward(params, batch, "inference")
    return T.softmax(logits)
