"""Untrained MultiResUNet generator used as the deep image prior.

The network maps a noise tensor ``z`` to an image in (0, 1). Encoder levels are
MultiRes blocks followed by stride-2 3x3 convolutions, the decoder upsamples by
nearest-neighbour interpolation, and each skip connection goes through a
Residual Path. Every convolution is followed by BatchNorm + LeakyReLU except the
output projection, which is squashed by a sigmoid.

The trainable injection gain ``gamma`` lives on the module so that one optimizer
covers both the weights and the gain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

GAMMA_INIT = 0.01


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_features: int = 512
    input_channels: int = 3
    output_channels: int = 3
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_features < 1:
            raise ValueError(f"base_features must be >= 1, got {self.base_features}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ValueError("channel counts must be positive")

    def level_width(self, level: int) -> int:
        """Nominal width at ``level`` (0 = full resolution, ``depth`` = bottleneck)."""
        return self.base_features * min(2 ** level, 4)


class ConvBNAct(nn.Module):
    """Convolution, batch normalization and LeakyReLU."""

    def __init__(self, cin, cout, kernel_size, stride=1, negative_slope=0.2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride=stride,
                              padding=kernel_size // 2, bias=False)
        self.bn = nn.BatchNorm2d(cout, track_running_stats=False)
        self.negative_slope = negative_slope

    def forward(self, x):
        return F.leaky_relu(self.bn(self.conv(x)), self.negative_slope)


def multires_split(width: int) -> tuple[int, int, int]:
    """Split a nominal block width 1:2:3 across the three chained convolutions."""
    a = max(1, int(width / 6 + 0.5))
    b = max(1, int(width / 3 + 0.5))
    c = max(1, width - a - b)
    return a, b, c


class MultiResBlock(nn.Module):
    def __init__(self, cin, width, negative_slope=0.2):
        super().__init__()
        a, b, c = multires_split(width)
        self.out_channels = a + b + c
        self.conv1 = ConvBNAct(cin, a, 3, negative_slope=negative_slope)
        self.conv2 = ConvBNAct(a, b, 3, negative_slope=negative_slope)
        self.conv3 = ConvBNAct(b, c, 3, negative_slope=negative_slope)
        self.shortcut = ConvBNAct(cin, self.out_channels, 1, negative_slope=negative_slope)

    def forward(self, x):
        y1 = self.conv1(x)
        y2 = self.conv2(y1)
        y3 = self.conv3(y2)
        return torch.cat([y1, y2, y3], dim=1) + self.shortcut(x)


class ResPath(nn.Module):
    """Chain of ``length`` (3x3 conv + 1x1 shortcut) units replacing a skip connection."""

    def __init__(self, channels, length, negative_slope=0.2):
        super().__init__()
        self.convs = nn.ModuleList(
            ConvBNAct(channels, channels, 3, negative_slope=negative_slope) for _ in range(length))
        self.shortcuts = nn.ModuleList(
            ConvBNAct(channels, channels, 1, negative_slope=negative_slope) for _ in range(length))

    def forward(self, x):
        for conv, shortcut in zip(self.convs, self.shortcuts):
            x = conv(x) + shortcut(x)
        return x


class MultiResUNet(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        slope = config.negative_slope

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.respaths = nn.ModuleList()
        skip_channels = []
        cin = config.input_channels
        for level in range(config.depth):
            block = MultiResBlock(cin, config.level_width(level), slope)
            cin = block.out_channels
            self.encoders.append(block)
            self.respaths.append(ResPath(cin, config.depth - level, slope))
            self.downs.append(ConvBNAct(cin, cin, 3, stride=2, negative_slope=slope))
            skip_channels.append(cin)

        self.bottleneck = MultiResBlock(cin, config.level_width(config.depth), slope)
        cin = self.bottleneck.out_channels

        # decoders[i] works at the resolution of encoders[i]
        decoders = [None] * config.depth
        for level in reversed(range(config.depth)):
            block = MultiResBlock(cin + skip_channels[level], config.level_width(level), slope)
            decoders[level] = block
            cin = block.out_channels
        self.decoders = nn.ModuleList(decoders)

        self.head = nn.Conv2d(cin, config.output_channels, 1)
        self.gamma = nn.Parameter(torch.tensor(GAMMA_INIT))

    def forward(self, z):
        factor = 2 ** self.config.depth
        if z.shape[-1] % factor or z.shape[-2] % factor:
            raise ValueError(
                f"input {tuple(z.shape[-2:])} not divisible by 2**depth = {factor}")
        if z.shape[1] != self.config.input_channels:
            raise ValueError(
                f"expected {self.config.input_channels} input channels, got {z.shape[1]}")

        skips = []
        x = z
        for enc, down, respath in zip(self.encoders, self.downs, self.respaths):
            x = enc(x)
            skips.append(respath(x))
            x = down(x)
        x = self.bottleneck(x)
        for level in reversed(range(self.config.depth)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.decoders[level](torch.cat([x, skips[level]], dim=1))
        return torch.sigmoid(self.head(x))

    def project_gamma(self):
        with torch.no_grad():
            self.gamma.clamp_(min=0.0)


def build_generator(config: GeneratorConfig, rng_seed: int,
                    dtype: torch.dtype = torch.float32) -> MultiResUNet:
    """Construct a generator with weights initialised reproducibly from ``rng_seed``.

    A private ``torch.Generator`` drives initialisation so that the global RNG
    is never touched.
    """
    gen = torch.Generator().manual_seed(int(rng_seed))
    # module constructors draw default weights from the global generator
    with torch.random.fork_rng(devices=[]):
        net = MultiResUNet(config).to(dtype)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                bound = 1.0 / np.sqrt(fan_in)
                # kaiming-uniform with a=sqrt(5), the torch default for Conv2d
                w_bound = np.sqrt(6.0 / ((1 + 5.0) * fan_in))
                module.weight.uniform_(-w_bound, w_bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
    net.train()
    return net


def to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x C array to a 1 x C x H x W tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.transpose(image, (2, 0, 1)))).to(dtype)[None]


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """1 x C x H x W tensor to an H x W x C float64 array."""
    return tensor.detach()[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)


def generator_forward(net: MultiResUNet, z) -> np.ndarray:
    """Evaluate the generator on seed noise, returning an H x W x C image in (0, 1).

    ``z`` may be a :class:`~dippas.engine.SeedNoise`, an ``H x W x C`` array or a
    ``1 x C x H x W`` tensor.
    """
    values = getattr(z, "values", z)
    dtype = next(net.parameters()).dtype
    if isinstance(values, np.ndarray):
        if values.ndim != 3:
            raise ValueError(f"seed noise must be H x W x C, got shape {values.shape}")
        values = to_tensor(values, dtype)
    with torch.no_grad():
        out = net(values.to(dtype))
    return to_image(out)
