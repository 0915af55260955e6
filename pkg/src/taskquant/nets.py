"""Encoder/decoder, frozen segmenter and frozen perceptual feature extractor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Parameter, Tensor

VALID_RATIOS = (2, 4, 8, 16, 32)
SEGMENTER_WIDTH = 32
EXTRACTOR_WIDTHS = (16, 32, 64)
EXTRACTOR_SEED = 20240917


@dataclass(frozen=True)
class EncoderDecoderConfig:
    r: int = 4
    D: int = 8
    widths: tuple[int, ...] = (16, 32)
    variant: str = "shallow"
    n_res_blocks: int = 2

    def __post_init__(self):
        if self.r not in VALID_RATIOS:
            raise ValueError(f"compression ratio must be one of {VALID_RATIOS}, got {self.r}")
        if self.variant not in ("shallow", "residual"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.D < 1 or not self.widths:
            raise ValueError("D and widths must be positive")

    @property
    def stages(self) -> int:
        return int(math.log2(self.r))

    def stage_widths(self) -> list[int]:
        w = list(self.widths[: self.stages])
        return w + [self.widths[-1]] * (self.stages - len(w))


class Conv:
    def __init__(self, name, k, cin, cout, rng, dtype, stride=1, padding=None):
        bound = 1.0 / math.sqrt(k * k * cin)
        self.kernel = Parameter(rng.uniform(-bound, bound, (k, k, cin, cout)).astype(dtype), f"{name}.kernel")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def params(self):
        return [self.kernel, self.bias]

    def __call__(self, x):
        return ad.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class ConvT:
    def __init__(self, name, k, cin, cout, rng, dtype, stride=2):
        bound = 1.0 / math.sqrt(k * k * cin / (stride * stride))
        self.kernel = Parameter(rng.uniform(-bound, bound, (k, k, cout, cin)).astype(dtype), f"{name}.kernel")
        self.bias = Parameter(np.zeros(cout, dtype=dtype), f"{name}.bias")
        self.stride = stride

    def params(self):
        return [self.kernel, self.bias]

    def __call__(self, x):
        return ad.conv_transpose2d(x, self.kernel, self.bias, self.stride)


class Act:
    def params(self):
        return []

    def __call__(self, x):
        return ad.silu(x)


class Squash:
    def params(self):
        return []

    def __call__(self, x):
        return ad.sigmoid(x)


class ResBlock:
    def __init__(self, name, width, rng, dtype):
        self.c1 = Conv(f"{name}.c1", 3, width, width, rng, dtype)
        self.c2 = Conv(f"{name}.c2", 3, width, width, rng, dtype)

    def params(self):
        return self.c1.params() + self.c2.params()

    def __call__(self, x):
        return ad.add_residual(x, self.c2(ad.silu(self.c1(x))))


class Network:
    """An ordered stack of layers with named parameters."""

    def __init__(self, name: str, layers: list, in_channels: int, out_channels: int,
                 downscale: int = 1, upscale: int = 1):
        self.name = name
        self.layers = layers
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.downscale = downscale
        self.upscale = upscale
        self.frozen = False

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def n_params(self) -> int:
        return ad.param_count(self.parameters())

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        *lead, h, w, c = shape
        if c != self.in_channels:
            raise ad.ShapeError(f"{self.name} expects {self.in_channels} channels, got {c}")
        if h % self.downscale or w % self.downscale:
            raise ad.ShapeError(f"{self.name}: spatial dims {h}x{w} not divisible by {self.downscale}")
        h = h // self.downscale * self.upscale
        w = w // self.downscale * self.upscale
        return (*lead, h, w, self.out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        self.output_shape(x.shape)
        for layer in self.layers:
            x = layer(x)
        return x

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            src = np.asarray(state[p.name])
            if src.shape != p.shape:
                raise ad.ShapeError(f"{p.name}: shape {src.shape} != {p.shape}")
            p.data[...] = src

    def freeze(self) -> None:
        self.frozen = True
        for p in self.parameters():
            p.freeze()

    def digest(self) -> str:
        return checkpoint.digest(self.state_dict())


class FeatureExtractor(Network):
    """Returns the activations after each of its strided stages."""

    def __call__(self, x: Tensor) -> list[Tensor]:
        self.output_shape(x.shape)
        feats = []
        for layer in self.layers:
            x = layer(x)
            if isinstance(layer, Act):
                feats.append(x)
        return feats


def _check_divisible(cfg: EncoderDecoderConfig, H: int | None, W: int | None) -> None:
    for n in (H, W):
        if n is not None and n % cfg.r:
            raise ValueError(f"image dimension {n} not divisible by r={cfg.r}")


def build_encoder(cfg: EncoderDecoderConfig, rng: np.random.Generator,
                  dtype=np.float32, H: int | None = None, W: int | None = None) -> Network:
    _check_divisible(cfg, H, W)
    layers: list = []
    cin = 3
    for i, w in enumerate(cfg.stage_widths()):
        layers += [Conv(f"encoder.down{i}", 4, cin, w, rng, dtype, stride=2, padding=1), Act()]
        cin = w
    if cfg.variant == "residual":
        layers += [ResBlock(f"encoder.res{i}", cin, rng, dtype) for i in range(cfg.n_res_blocks)]
    layers.append(Conv("encoder.out", 3, cin, cfg.D, rng, dtype))
    return Network("encoder", layers, 3, cfg.D, downscale=cfg.r)


def build_decoder(cfg: EncoderDecoderConfig, rng: np.random.Generator,
                  dtype=np.float32, H: int | None = None, W: int | None = None) -> Network:
    _check_divisible(cfg, H, W)
    widths = cfg.stage_widths()
    layers: list = [Conv("decoder.in", 3, cfg.D, widths[-1], rng, dtype), Act()]
    if cfg.variant == "residual":
        layers += [ResBlock(f"decoder.res{i}", widths[-1], rng, dtype) for i in range(cfg.n_res_blocks)]
    for i in reversed(range(cfg.stages)):
        cout = widths[i - 1] if i > 0 else 3
        layers.append(ConvT(f"decoder.up{i}", 4, widths[i], cout, rng, dtype))
        layers.append(Act() if i > 0 else Squash())
    return Network("decoder", layers, cfg.D, 3, upscale=cfg.r)


def build_segmenter(m: int, rng: np.random.Generator, dtype=np.float32) -> Network:
    """Per-pixel classifier: 5x5 conv then two 1x1 convs, all stride 1."""
    if m < 2:
        raise ValueError("segmenter needs at least two classes")
    w = SEGMENTER_WIDTH
    layers = [Conv("segmenter.c0", 5, 3, w, rng, dtype), Act(),
              Conv("segmenter.c1", 1, w, w, rng, dtype), Act(),
              Conv("segmenter.c2", 1, w, m, rng, dtype)]
    return Network("segmenter", layers, 3, m)


def build_feature_extractor(dtype=np.float32, seed: int = EXTRACTOR_SEED) -> FeatureExtractor:
    """Random frozen conv stack giving features at 1/2, 1/4 and 1/8 scale."""
    rng = np.random.default_rng(seed)
    layers: list = []
    cin = 3
    for i, w in enumerate(EXTRACTOR_WIDTHS):
        layers += [Conv(f"extractor.s{i}", 4, cin, w, rng, dtype, stride=2, padding=1), Act()]
        cin = w
    net = FeatureExtractor("extractor", layers, 3, cin, downscale=8)
    net.freeze()
    return net
