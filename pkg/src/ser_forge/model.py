"""The six-block CNN classifier with optional efficient channel attention.

Each block is a 3x3 stride-1 convolution, batchnorm, and ReLU, followed by
2x2 average pooling (global average pooling after block six). Channel counts
are (16, 32, 48, 64, 80, 96) times a scale factor. An attention block can be
attached after any block's activation: it pools each channel to a scalar,
mixes neighboring channels with a k-tap 1-D convolution (no bias, no
batchnorm), squashes to (0, 1) with a sigmoid, and rescales the channel maps.
Two fully connected layers (hidden width equal to the last channel count)
produce the class logits; softmax is applied by the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import (
    BatchNormState,
    Tensor,
    avgpool2d,
    batchnorm2d,
    conv1d_same,
    conv2d,
    global_avgpool,
    linear,
    relu,
    reshape,
    scale_channels,
    sigmoid,
)
from .errors import InvalidConfigError, InvalidShapeError

BASE_CHANNELS = (16, 32, 48, 64, 80, 96)
NUM_BLOCKS = 6
CONV_KERNEL = 3
PROPOSED_ECA_KERNEL = 7
PROPOSED_ECA_LAYERS = (5, 6)


def original_eca_kernel(channels: int) -> int:
    """Channel-adaptive kernel size: odd integer near log2(C)/2 + 1/2, min 3."""
    if channels < 1:
        raise InvalidConfigError(f"channels must be >= 1, got {channels}")
    t = int(abs(math.log2(channels) / 2.0 + 0.5))
    k = t if t % 2 == 1 else t + 1
    return max(k, 3)


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters of the classifier."""

    scale_n: int = 1
    eca_placement: tuple = ()  # ((layer 1..6, odd kernel size), ...)
    num_classes: int = 4
    input_shape: tuple = (601, 64, 1)  # (T, M, C)

    def __post_init__(self):
        if self.scale_n < 1:
            raise InvalidConfigError(f"scale_n must be >= 1, got {self.scale_n}")
        if self.num_classes < 2:
            raise InvalidConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        placement = tuple((int(layer), int(k)) for layer, k in self.eca_placement)
        object.__setattr__(self, "eca_placement", placement)
        seen = set()
        for layer, k in placement:
            if not 1 <= layer <= NUM_BLOCKS:
                raise InvalidConfigError(f"attention layer index {layer} outside 1..{NUM_BLOCKS}")
            if layer in seen:
                raise InvalidConfigError(f"duplicate attention placement at layer {layer}")
            if k < 1 or k % 2 == 0:
                raise InvalidConfigError(f"attention kernel size must be odd, got {k}")
            seen.add(layer)
        if len(self.input_shape) != 3:
            raise InvalidConfigError(f"input_shape must be (T, M, C), got {self.input_shape}")

    @property
    def channels(self) -> tuple:
        return tuple(c * self.scale_n for c in BASE_CHANNELS)

    @property
    def label(self) -> str:
        tag = f"n{self.scale_n}"
        if self.eca_placement:
            tag += "+eca" + ",".join(f"{layer}k{k}" for layer, k in self.eca_placement)
        return tag


def eca_preset(name: str, scale_n: int = 1) -> tuple:
    """Named attention placements: none, proposed (layers 5-6, k=7), or
    original (every layer, channel-adaptive kernel)."""
    if name == "none":
        return ()
    if name == "proposed":
        return tuple((layer, PROPOSED_ECA_KERNEL) for layer in PROPOSED_ECA_LAYERS)
    if name == "original":
        channels = tuple(c * scale_n for c in BASE_CHANNELS)
        return tuple((i + 1, original_eca_kernel(channels[i])) for i in range(NUM_BLOCKS))
    raise InvalidConfigError(f"unknown attention preset {name!r}")


class EcaBlock:
    """A k-tap channel-mixing kernel; exactly k trainable parameters."""

    def __init__(self, kernel: Tensor):
        self.kernel = kernel

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[2]


class ConvBlock:
    """Convolution weights plus batchnorm parameters and running stats."""

    def __init__(self, weight, bias, gamma, beta, state):
        self.weight = weight
        self.bias = bias
        self.gamma = gamma
        self.beta = beta
        self.state = state


def eca_forward(x: Tensor, block: EcaBlock) -> Tensor:
    """Rescale channel maps by sigmoid-gated neighborhood-mixed pooled scores."""
    scores = eca_scores(x, block)
    return scale_channels(x, scores)


def eca_scores(x: Tensor, block: EcaBlock) -> Tensor:
    if x.ndim != 4:
        raise InvalidShapeError(f"attention input must be (N,C,H,W), got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    pooled = global_avgpool(x)  # (N, C)
    mixed = conv1d_same(reshape(pooled, (n, 1, c)), block.kernel)
    return reshape(sigmoid(mixed), (n, c))


class Model:
    """The assembled network; owns every trainable tensor and stat buffer."""

    def __init__(self, config: ModelConfig, blocks, ecas, fc1_weight, fc1_bias,
                 fc2_weight, fc2_bias):
        self.config = config
        self.blocks = blocks
        self.ecas = ecas  # {layer index: EcaBlock}
        self.fc1_weight = fc1_weight
        self.fc1_bias = fc1_bias
        self.fc2_weight = fc2_weight
        self.fc2_bias = fc2_bias

    def parameters(self):
        """Ordered (name, tensor) pairs of every trainable parameter."""
        out = []
        for i, block in enumerate(self.blocks, start=1):
            out.append((f"conv{i}.weight", block.weight))
            out.append((f"conv{i}.bias", block.bias))
            out.append((f"bn{i}.gamma", block.gamma))
            out.append((f"bn{i}.beta", block.beta))
        for layer in sorted(self.ecas):
            out.append((f"eca{layer}.kernel", self.ecas[layer].kernel))
        out.append(("fc1.weight", self.fc1_weight))
        out.append(("fc1.bias", self.fc1_bias))
        out.append(("fc2.weight", self.fc2_weight))
        out.append(("fc2.bias", self.fc2_bias))
        return out

    def buffers(self):
        """Ordered (name, array) pairs of the batchnorm running statistics."""
        out = []
        for i, block in enumerate(self.blocks, start=1):
            out.append((f"bn{i}.running_mean", block.state.running_mean))
            out.append((f"bn{i}.running_var", block.state.running_var))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()

    def spatial_trace(self):
        """(H, W) after each of the five 2x2 pooling stages."""
        h, w = self.config.input_shape[0], self.config.input_shape[1]
        trace = []
        for _ in range(NUM_BLOCKS - 1):
            if h >= 2 and w >= 2:
                h, w = h // 2, w // 2
            trace.append((h, w))
        return trace

    def forward(self, batch, mode: str = "train", eca_capture: dict | None = None) -> Tensor:
        """Run the network on an (N, 1, T, M) batch and return (N, classes) logits.

        `eca_capture`, when given, is filled with {layer: (N, C) score array}.
        """
        if mode not in ("train", "eval"):
            raise InvalidConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        t_len, m_len, c_in = self.config.input_shape
        if x.ndim != 4 or x.shape[1] != c_in or x.shape[2] != t_len or x.shape[3] != m_len:
            raise InvalidShapeError(
                f"expected batch shaped (N, {c_in}, {t_len}, {m_len}), got {x.shape}"
            )
        h = x
        for i, block in enumerate(self.blocks, start=1):
            h = conv2d(h, block.weight, block.bias, stride=1, padding=1)
            h = batchnorm2d(h, block.gamma, block.beta, block.state, mode, fuse_relu=True)
            if i in self.ecas:
                scores = eca_scores(h, self.ecas[i])
                if eca_capture is not None:
                    eca_capture[i] = scores.data.copy()
                h = scale_channels(h, scores)
            if i < NUM_BLOCKS:
                # pooling saturates once a spatial dim reaches 1 (toy inputs)
                if h.shape[2] >= 2 and h.shape[3] >= 2:
                    h = avgpool2d(h)
            else:
                h = global_avgpool(h)
        h = relu(linear(h, self.fc1_weight, self.fc1_bias))
        return linear(h, self.fc2_weight, self.fc2_bias)


def build_model(config: ModelConfig, rng_seed: int, dtype=np.float32) -> Model:
    """Construct a model with He-initialized weights, deterministic per seed.

    Weights draw from N(0, sqrt(2 / fan_in)); biases start at zero, batchnorm
    at gamma=1 / beta=0, attention kernels at fan_in = kernel size.
    """
    rng = np.random.default_rng(rng_seed)
    channels = config.channels
    c_in = config.input_shape[2]

    def he(shape, fan_in):
        std = math.sqrt(2.0 / fan_in)
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    blocks = []
    prev = c_in
    for c in channels:
        weight = he((c, prev, CONV_KERNEL, CONV_KERNEL), prev * CONV_KERNEL * CONV_KERNEL)
        bias = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        blocks.append(ConvBlock(weight, bias, gamma, beta, BatchNormState(c, dtype=dtype)))
        prev = c

    hidden = channels[-1]
    fc1_weight = he((hidden, hidden), hidden)
    fc1_bias = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
    fc2_weight = he((config.num_classes, hidden), hidden)
    fc2_bias = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)

    ecas = {}
    for layer, k in sorted(config.eca_placement):
        ecas[layer] = EcaBlock(he((1, 1, k), k))

    return Model(config, blocks, ecas, fc1_weight, fc1_bias, fc2_weight, fc2_bias)


def extract_eca_scores(model: Model, batch, layer: int) -> np.ndarray:
    """Per-sample attention scores at one layer, eval mode, model untouched."""
    if layer not in model.ecas:
        raise InvalidConfigError(f"layer {layer} has no attention block")
    capture = {}
    model.forward(batch, mode="eval", eca_capture=capture)
    return capture[layer]
