"""Configurable 3D U-Net baseline.

Encoder and decoder each consist of ``depth`` convolution blocks; the first
block has ``base_features`` channels and the width doubles per level down to
the bottleneck. Skip connections concatenate each encoder level into the
matching decoder level, and a final 1x1x1 convolution produces logits. Inputs
whose extents are not divisible by 2**depth are padded internally and the
output is cropped back, so output spatial shape always equals input shape.

The full-scale configuration used in the OAI experiments had 2,041,825
trainable parameters; the default configuration here reports its own count
(the two are compared, not forced to coincide, since width/normalization
details do not pin the number down uniquely).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

OAI_UNET3D_PARAM_COUNT = 2_041_825

NORM_KINDS = ("batch", "instance", "none")
UP_KINDS = ("transpose", "trilinear")


@dataclass(frozen=True)
class UNet3DConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_features: int = 16
    depth: int = 3
    convs_per_block: int = 2
    norm: str = "batch"
    up_mode: str = "transpose"

    def validate(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.base_features < 1:
            raise ValueError(f"base_features must be >= 1, got {self.base_features}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")
        if self.up_mode not in UP_KINDS:
            raise ValueError(f"up_mode must be one of {UP_KINDS}")

    def features_at(self, level: int) -> int:
        return self.base_features * (2 ** level)


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    return nn.Identity()


class ConvBlock(nn.Module):
    """convs_per_block x (3x3x3 conv -> norm -> ReLU)."""

    def __init__(self, in_ch: int, out_ch: int, convs: int, norm: str):
        super().__init__()
        layers = []
        ch = in_ch
        for _ in range(convs):
            layers += [
                nn.Conv3d(ch, out_ch, kernel_size=3, padding=1),
                _norm_layer(norm, out_ch),
                nn.ReLU(inplace=True),
            ]
            ch = out_ch
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class UNet3D(nn.Module):
    def __init__(self, config: UNet3DConfig | None = None):
        super().__init__()
        config = config or UNet3DConfig()
        config.validate()
        self.config = config

        enc = []
        ch = config.in_channels
        for level in range(config.depth):
            out = config.features_at(level)
            enc.append(ConvBlock(ch, out, config.convs_per_block, config.norm))
            ch = out
        self.encoder = nn.ModuleList(enc)
        self.pool = nn.MaxPool3d(2)

        bottleneck_ch = config.features_at(config.depth)
        self.bottleneck = ConvBlock(ch, bottleneck_ch, config.convs_per_block, config.norm)

        ups, dec = [], []
        ch = bottleneck_ch
        for level in reversed(range(config.depth)):
            skip_ch = config.features_at(level)
            if config.up_mode == "transpose":
                ups.append(nn.ConvTranspose3d(ch, skip_ch, kernel_size=2, stride=2))
                up_out = skip_ch
            else:
                ups.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="trilinear", align_corners=False),
                        nn.Conv3d(ch, skip_ch, kernel_size=1),
                    )
                )
                up_out = skip_ch
            dec.append(ConvBlock(up_out + skip_ch, skip_ch, config.convs_per_block, config.norm))
            ch = skip_ch
        self.ups = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv3d(ch, config.out_channels, kernel_size=1)

    def _pad_to_multiple(self, x):
        m = 2 ** self.config.depth
        pads = []
        for size in reversed(x.shape[2:]):  # F.pad wants last-dim-first
            total = (-size) % m
            pads += [total // 2, total - total // 2]
        if any(pads):
            x = F.pad(x, pads)
        return x, pads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input (N, {self.config.in_channels}, X, Y, Z), got {tuple(x.shape)}"
            )
        original = x.shape[2:]
        x, pads = self._pad_to_multiple(x)
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.ups, self.decoder, reversed(skips)):
            x = up(x)
            x = block(torch.cat([skip, x], dim=1))
        x = self.head(x)
        if any(pads):
            lo = [pads[2 * (2 - i)] for i in range(3)]  # undo last-dim-first order
            x = x[
                :,
                :,
                lo[0] : lo[0] + original[0],
                lo[1] : lo[1] + original[1],
                lo[2] : lo[2] + original[2],
            ]
        return x


def build_unet3d(config: UNet3DConfig | None = None) -> UNet3D:
    return UNet3D(config)


def parameter_count(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(
        p.numel() for p in model.parameters() if p.requires_grad or not trainable_only
    )


@torch.no_grad()
def predict_mask_volume(model: UNet3D, volume, threshold: float = 0.5, device="cpu"):
    """Run the network on one Volume and return a BinaryMask of equal geometry."""
    from .volume import BinaryMask

    model = model.to(device).eval()
    x = torch.from_numpy(volume.data).float()[None, None].to(device)
    probs = torch.sigmoid(model(x))[0, 0].cpu().numpy()
    return BinaryMask((probs >= threshold).astype("uint8"), volume.spacing, volume.axes)
