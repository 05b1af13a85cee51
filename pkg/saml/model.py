# Copyright (c) 2026, saml-pipeline contributors.

"""Small U-Net with an auxiliary per-pixel embedding head."""

import re

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError

NUM_CLASSES = 3

_DESCRIPTOR = re.compile(r"^unet\((?P<args>[a-z_=0-9, ]*)\)$")
_DEFAULTS = {"depth": 2, "base": 16, "embed": 32}


def parse_descriptor(descriptor: str) -> dict[str, int]:
    """Parse ``unet(depth=2,base=16,embed=32)``; missing keys take defaults."""
    match = _DESCRIPTOR.match(descriptor.strip())
    if match is None:
        raise InputError(
            f"Unsupported architecture '{descriptor}'. Expected "
            "'unet(depth=<int>,base=<int>,embed=<int>)'."
        )
    params = dict(_DEFAULTS)
    for item in filter(None, (s.strip() for s in match["args"].split(","))):
        key, _, value = item.partition("=")
        if key not in _DEFAULTS or not value.isdigit() or int(value) < 1:
            raise InputError(f"Bad architecture parameter '{item}' in '{descriptor}'")
        params[key] = int(value)
    return params


def _conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder returning class logits and pixel embeddings.

    Both outputs keep the input's spatial size; height and width must be
    multiples of :attr:`stride`.
    """

    def __init__(self, depth: int = 2, base: int = 16, embed: int = 32, in_channels=3):
        super().__init__()
        self.depth = depth
        self.descriptor = f"unet(depth={depth},base={base},embed={embed})"
        widths = [base * 2**i for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        channels = in_channels
        for width in widths[:-1]:
            self.encoders.append(_conv_block(channels, width))
            channels = width
        self.bottleneck = _conv_block(channels, widths[-1])
        self.upsamples = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for width in reversed(widths[:-1]):
            self.upsamples.append(nn.ConvTranspose2d(width * 2, width, 2, stride=2))
            self.decoders.append(_conv_block(width * 2, width))
        self.classifier = nn.Conv2d(base, NUM_CLASSES, 1)
        self.embedding = nn.Conv2d(base, embed, 1)

    @classmethod
    def from_descriptor(cls, descriptor: str) -> "UNet":
        return cls(**parse_descriptor(descriptor))

    @property
    def stride(self) -> int:
        return 2**self.depth

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        stages = zip(self.upsamples, self.decoders, reversed(skips))
        for upsample, decoder, skip in stages:
            x = decoder(torch.cat([upsample(x), skip], dim=1))
        return self.classifier(x), self.embedding(x)
