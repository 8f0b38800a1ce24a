"""Baseline CNN and pretrained-backbone construction.

The baseline downsamples a 3x384x384 image through six convolution blocks
(kernels 11, 7, 5, 5, 3, 3; each block conv -> batch norm -> ReLU -> 2x2
max pool) to 256 feature maps of 5x5, flattens to 6400 inputs, and
classifies through two hidden fully connected layers.
"""

from __future__ import annotations

import torch
import torch.nn as nn

BASELINE_CHANNELS = (16, 32, 64, 128, 192, 256)
BASELINE_KERNELS = (11, 7, 5, 5, 3, 3)
INPUT_SIZE = 384
FLATTEN_WIDTH = 256 * 5 * 5  # 6400


class BaselineVergeNet(nn.Module):
    """Six-block convolutional classifier with a 6400-wide flatten."""

    def __init__(self, classes: int = 4, channels=BASELINE_CHANNELS):
        super().__init__()
        if len(channels) != 6:
            raise ValueError("baseline expects 6 channel widths")
        blocks = []
        cin = 3
        for i, (cout, k) in enumerate(zip(channels, BASELINE_KERNELS)):
            # blocks 1-5 preserve spatial size before pooling (384 -> 12);
            # the last block convolves unpadded (12 -> 10) so pooling lands on 5
            padding = k // 2 if i < 5 else 0
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, k, padding=padding),
                    nn.BatchNorm2d(cout),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                )
            )
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.flatten = nn.Flatten()
        self.classifier = nn.Sequential(
            nn.Linear(FLATTEN_WIDTH, 1024),
            nn.BatchNorm1d(1024),
            nn.ReLU(inplace=True),
            nn.Linear(1024, 256),
            nn.BatchNorm1d(256),
            nn.ReLU(inplace=True),
            nn.Linear(256, classes),
        )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-flatten feature maps, shape (B, 256, 5, 5)."""
        return self.blocks(x)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Flattened 6400-wide penultimate representation."""
        return self.flatten(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed(x))


KNOWN_BACKBONES = ("resnet18", "resnet34", "resnet50", "resnet101", "resnet152")


def build_model(arch: str = "baseline", classes: int = 4, pretrained: bool = False) -> nn.Module:
    """Baseline network or a torchvision backbone with its head reduced.

    Pretrained weights are only loaded on request (they require a download);
    either way the final fully connected layer is replaced so the output
    width equals the class count.
    """
    if arch == "baseline":
        return BaselineVergeNet(classes=classes)
    if arch in KNOWN_BACKBONES:
        import torchvision.models as tvm

        ctor = getattr(tvm, arch)
        model = ctor(weights="DEFAULT" if pretrained else None)
        model.fc = nn.Linear(model.fc.in_features, classes)
        return model
    raise ValueError(f"unknown architecture {arch!r}; expected 'baseline' or one of {KNOWN_BACKBONES}")


def embedding_width(model: nn.Module) -> int:
    if isinstance(model, BaselineVergeNet):
        return FLATTEN_WIDTH
    fc = getattr(model, "fc", None)
    if isinstance(fc, nn.Linear):
        return fc.in_features
    raise ValueError("cannot determine embedding width for this model")


def embed_batch(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Penultimate-layer activations for either model family."""
    if isinstance(model, BaselineVergeNet):
        return model.embed(x)
    # torchvision resnets: everything up to the final fc
    modules = list(model.children())[:-1]
    feats = nn.Sequential(*modules)(x)
    return torch.flatten(feats, 1)
