"""Toy architectures for desk-scale export/assembly/distillation runs."""

import torch
import torch.nn as nn


class ToyCNN(nn.Module):
    """Two plain 3x3 convolutions, pooling, and a linear head.

    Sized for 3x16x16 inputs and four classes by default.
    """

    def __init__(self, in_channels=3, classes=4):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 8, 3, padding=1, bias=True),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1, bias=True),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.head = nn.Linear(16 * 4 * 4, classes)

    def forward(self, x):
        h = self.features(x)
        return self.head(h.flatten(1))


class ToyGrouped(nn.Module):
    """Variant with a depthwise (grouped) conv that export must skip."""

    def __init__(self, in_channels=3, classes=4):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, 8, 3, padding=1)
        self.depthwise = nn.Conv2d(8, 8, 3, padding=1, groups=8)
        self.head = nn.Linear(8, classes)

    def forward(self, x):
        h = torch.relu(self.stem(x))
        h = torch.relu(self.depthwise(h))
        return self.head(h.mean(dim=(2, 3)))


class ToyMLP(nn.Module):
    """No convolutions at all; exports to an empty archive."""

    def __init__(self, in_features=48, classes=4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_features, 32), nn.ReLU(),
                                 nn.Linear(32, classes))

    def forward(self, x):
        return self.net(x.flatten(1))


ARCHITECTURES = {
    "toycnn": ToyCNN,
    "toygrouped": ToyGrouped,
    "toymlp": ToyMLP,
}


def build(arch, **kwargs):
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; "
                         f"choices: {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[arch](**kwargs)
