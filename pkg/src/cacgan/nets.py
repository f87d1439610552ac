"""Network architectures: 3D heart segmenter, 2D slice classifier, CAC-map
generator and PatchGAN discriminator.

Channel widths are parameters so desk-scale runs can shrink the networks while
keeping the layer layout of the full-size models.
"""

from __future__ import annotations

import hashlib
import json

import torch
from torch import nn


def _norm2d(kind, ch):
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "instance":
        return nn.InstanceNorm2d(ch)
    raise ValueError(f"unknown norm {kind!r}")


class ResBlock3d(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(ch, ch, 3, padding=1), nn.BatchNorm3d(ch), nn.ReLU(inplace=True),
            nn.Conv3d(ch, ch, 3, padding=1), nn.BatchNorm3d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class ResBlock2d(nn.Module):
    def __init__(self, ch, norm="batch"):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm2d(norm, ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm2d(norm, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class HeartSegNet(nn.Module):
    """Conv7 -> 2x strided conv -> residual blocks -> 2x transposed conv -> Conv7, sigmoid.

    Zero padding throughout; output has two channels (background, heart) on the
    input grid. Input spatial dims must be divisible by 4.
    """

    def __init__(self, widths=(16, 32, 64), n_blocks=9):
        super().__init__()
        a, b, c = widths
        self.arch = {"kind": "heartseg", "widths": list(widths), "n_blocks": n_blocks}

        def cbr(cin, cout, k, s=1):
            return [nn.Conv3d(cin, cout, k, stride=s, padding=k // 2), nn.BatchNorm3d(cout), nn.ReLU(inplace=True)]

        def tbr(cin, cout):
            return [nn.ConvTranspose3d(cin, cout, 3, stride=2, padding=1, output_padding=1),
                    nn.BatchNorm3d(cout), nn.ReLU(inplace=True)]

        self.net = nn.Sequential(
            *cbr(1, a, 7), *cbr(a, b, 3, 2), *cbr(b, c, 3, 2),
            *[ResBlock3d(c) for _ in range(n_blocks)],
            *tbr(c, b), *tbr(b, a),
            nn.Conv3d(a, 2, 7, padding=3),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class SliceClassifierNet(nn.Module):
    """2D ResNet with reflection padding, global average pooling and a 2-way dense head."""

    def __init__(self, widths=(64, 128, 256), n_blocks=6):
        super().__init__()
        a, b, c = widths
        self.arch = {"kind": "classifier", "widths": list(widths), "n_blocks": n_blocks}
        self.features = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(1, a, 7), nn.BatchNorm2d(a), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(a, b, 3, stride=2), nn.BatchNorm2d(b), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(b, c, 3, stride=2), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            *[ResBlock2d(c) for _ in range(n_blocks)],
        )
        self.head = nn.Linear(c, 2)

    def forward(self, x):
        """Class logits; use :meth:`predict_proba` for the softmax output."""
        return self.head(self.features(x).mean(dim=(2, 3)))

    def predict_proba(self, x):
        return torch.softmax(self(x), dim=1)


class CacGenerator(nn.Module):
    """Map generator: sigmoid output on the input grid, so maps are nonnegative."""

    def __init__(self, widths=(64, 128, 256), n_blocks=6, norm="batch"):
        super().__init__()
        a, b, c = widths
        self.arch = {"kind": "generator", "widths": list(widths), "n_blocks": n_blocks, "norm": norm}

        def nr(ch):
            return [_norm2d(norm, ch), nn.ReLU(inplace=True)]

        self.net = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(1, a, 7), *nr(a),
            nn.ReflectionPad2d(1), nn.Conv2d(a, b, 3, stride=2), *nr(b),
            nn.ReflectionPad2d(1), nn.Conv2d(b, c, 3, stride=2), *nr(c),
            *[ResBlock2d(c, norm) for _ in range(n_blocks)],
            nn.ConvTranspose2d(c, b, 3, stride=2, padding=1, output_padding=1), *nr(b),
            nn.ConvTranspose2d(b, a, 3, stride=2, padding=1, output_padding=1), *nr(a),
            nn.ReflectionPad2d(3), nn.Conv2d(a, 1, 7),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class PatchDiscriminator(nn.Module):
    """PatchGAN: 4x4 convs, leaky ReLU 0.2, instance norm from the second layer.

    With ``n_layers=3`` every output logit sees a 70x70 input patch.
    """

    def __init__(self, base=64, n_layers=3):
        super().__init__()
        self.arch = {"kind": "patchgan", "base": base, "n_layers": n_layers}
        layers = [nn.Conv2d(1, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        ch = base
        for n in range(1, n_layers):
            nxt = base * min(2 ** n, 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, inplace=True)]
            ch = nxt
        nxt = base * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(ch, nxt, 4, stride=1, padding=1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2, inplace=True)]
        layers += [nn.Conv2d(nxt, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        """Per-patch logits, shape (N, 1, h, w)."""
        return self.net(x)


def receptive_field(n_layers=3, k=4):
    """Receptive field of one PatchGAN output, walking back from the last layer."""
    strides = [2] * n_layers + [1, 1]
    r = 1
    for s in reversed(strides):
        r = (r - 1) * s + k
    return r


def arch_hash(model: nn.Module) -> str:
    return hashlib.sha256(json.dumps(model.arch, sort_keys=True).encode()).hexdigest()[:16]


def build(arch: dict) -> nn.Module:
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "heartseg":
        return HeartSegNet(tuple(arch["widths"]), arch["n_blocks"])
    if kind == "classifier":
        return SliceClassifierNet(tuple(arch["widths"]), arch["n_blocks"])
    if kind == "generator":
        return CacGenerator(tuple(arch["widths"]), arch["n_blocks"], arch.get("norm", "batch"))
    if kind == "patchgan":
        return PatchDiscriminator(arch["base"], arch["n_layers"])
    raise ValueError(f"unknown architecture {kind!r}")
