"""Two-channel U-Net producing MAB and LIB interior probability maps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetConfig:
    input_size: tuple[int, int] = (256, 320)
    depth: int = 4
    base_channels: int = 64
    channel_growth: float = 2.0
    batch_norm: bool = True
    out_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")
        step = 2**self.depth
        if any(s % step for s in self.input_size):
            raise ValueError(
                f"input size {self.input_size} not divisible by 2**depth={step}"
            )
        if self.out_channels not in (1, 2):
            raise ValueError("out_channels must be 1 or 2")

    def widths(self) -> list[int]:
        return [
            max(1, int(round(self.base_channels * self.channel_growth**i)))
            for i in range(self.depth + 1)
        ]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ProbabilityPair(NamedTuple):
    mab_prob: np.ndarray
    lib_prob: np.ndarray


def _conv_block(cin: int, cout: int, batch_norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for c_in in (cin, cout):
        layers.append(nn.Conv2d(c_in, cout, 3, stride=1, padding=1, bias=not batch_norm))
        if batch_norm:
            layers.append(nn.BatchNorm2d(cout))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    """Encoder-decoder with skip concatenations and a sigmoid output head.

    Each resolution level holds two conv-BN-ReLU blocks; downsampling is 2x2
    max pooling and upsampling a 2x2 stride-2 transpose convolution.
    """

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        widths = config.widths()
        bn = config.batch_norm
        self.down = nn.ModuleList()
        cin = 1
        for w in widths[:-1]:
            self.down.append(_conv_block(cin, w, bn))
            cin = w
        self.pool = nn.MaxPool2d(2, stride=2)
        self.bottleneck = _conv_block(widths[-2], widths[-1], bn)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(config.depth - 1, -1, -1):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.dec.append(_conv_block(2 * widths[i], widths[i], bn))
        self.head = nn.Conv2d(widths[0], config.out_channels, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                # variance scaling on fan-in, suited to ReLU
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.xavier_normal_(self.head.weight)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != self.config.input_size:
            raise ValueError(
                f"expected input of shape (B, 1, {self.config.input_size[0]}, "
                f"{self.config.input_size[1]}), got {tuple(x.shape)}"
            )
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


class SDLPair(nn.Module):
    """Two independent single-channel U-Nets stacked into a (MAB, LIB) output.

    Parameters are disjoint, so minimising L_MAB + L_LIB with a per-parameter
    optimiser trains each network on its own boundary loss.
    """

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        single = NetConfig(
            input_size=config.input_size,
            depth=config.depth,
            base_channels=config.base_channels,
            channel_growth=config.channel_growth,
            batch_norm=config.batch_norm,
            out_channels=1,
        )
        self.config = config
        self.mab_net = UNet(single)
        self.lib_net = UNet(single)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.mab_net(x), self.lib_net(x)], dim=1)


def build_model(config: NetConfig, sdl: bool = False) -> nn.Module:
    return SDLPair(config) if sdl else UNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: nn.Module, image: np.ndarray) -> ProbabilityPair:
    """Run a single normalised 2D image through `model` in eval mode."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {image.shape}")
    probs = predict_batch(model, image[None])
    return ProbabilityPair(probs[0, 0], probs[0, 1])


def predict_batch(model: nn.Module, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """(N, H, W) images -> (N, 2, H, W) probabilities, eval mode, no grad."""
    was_training = model.training
    model.eval()
    param = next(model.parameters())
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = torch.as_tensor(
                    np.ascontiguousarray(images[start:start + batch_size]),
                    dtype=param.dtype,
                ).unsqueeze(1)
                out.append(model(chunk).cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 2) + images.shape[1:])


def derive_cvw(mab_prob, lib_prob):
    """Vessel-wall probability: rectified difference of the MAB and LIB maps.

    Works on numpy arrays and torch tensors alike.
    """
    if tuple(mab_prob.shape) != tuple(lib_prob.shape):
        raise ValueError(f"shape mismatch: {tuple(mab_prob.shape)} vs {tuple(lib_prob.shape)}")
    if isinstance(mab_prob, torch.Tensor):
        return F.relu(mab_prob - lib_prob)
    return np.maximum(np.asarray(mab_prob) - np.asarray(lib_prob), 0.0)
