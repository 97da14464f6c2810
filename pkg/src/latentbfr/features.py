"""Fixed-weight perceptual feature pyramid.

Stands in for a pretrained classifier backbone: three conv stages with weights drawn
from a seeded generator and never trained. Registered by name so other extractors
(for instance a pretrained network) can be plugged in.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F


class PerceptualExtractor(nn.Module):
    def __init__(self, widths=(16, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            cin = w
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x * 2.0 - 1.0
        for i, conv in enumerate(self.convs):
            if i:
                h = F.avg_pool2d(h, 2)
            h = F.relu(conv(h))
            feats.append(h)
        return feats


def feature_l1(extractor: nn.Module, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute feature difference summed over pyramid levels (scalar)."""
    return sum((fa - fb).abs().mean() for fa, fb in zip(extractor(a), extractor(b)))


def feature_distance(extractor: nn.Module, a: torch.Tensor, b: torch.Tensor,
                     squared: bool = False) -> torch.Tensor:
    """Per-image L2 feature distance: sqrt of summed per-level mean squared differences. Shape (B,)."""
    total = 0.0
    for fa, fb in zip(extractor(a), extractor(b)):
        total = total + (fa - fb).pow(2).mean(dim=(1, 2, 3))
    return total if squared else total.sqrt()


_EXTRACTORS: dict[str, Callable[[], nn.Module]] = {
    "pyramid": PerceptualExtractor,
}


def register_extractor(name: str, factory: Callable[[], nn.Module]) -> None:
    _EXTRACTORS[name] = factory


def get_extractor(name: str = "pyramid") -> nn.Module:
    try:
        return _EXTRACTORS[name]()
    except KeyError:
        raise KeyError(f"unknown perceptual extractor {name!r}; registered: {sorted(_EXTRACTORS)}") from None
