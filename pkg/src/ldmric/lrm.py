"""Latent representation modules.

``LRM`` squeezes a (decoded, original) image pair into a fixed ``N x h x w``
prior latent; ``LRMDM`` is the same network with the original-image branch
removed, used to compute the diffusion condition from the decoded image
alone. All tensors are channels-first, ``(B, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

NEG_SLOPE = 0.2


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, C*r*r, H/r, W/r). Raises ShapeError on indivisible dims."""
    h, w = x.shape[-2:]
    if r < 1 or h % r or w % r:
        raise ShapeError(f"spatial size {h}x{w} not divisible by factor {r}")
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    c = x.shape[-3]
    if r < 1 or c % (r * r):
        raise ShapeError(f"channel count {c} not divisible by {r}^2")
    return F.pixel_shuffle(x, r)


@dataclass
class LRMConfig:
    widths: tuple = (64, 128, 256)
    n_latent: int = 256
    latent_size: int = 4
    pu_factor: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), NEG_SLOPE))


class _LatentTrunk(nn.Module):
    """Shared body: conv stack with residual blocks, adaptive pooling, token MLP."""

    def __init__(self, in_ch: int, cfg: LRMConfig):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.cfg = cfg
        self.conv_in = nn.Conv2d(in_ch, w1, 3, padding=1)
        self.rb1 = ResBlock(w1)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.rb2 = ResBlock(w2)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.rb3 = ResBlock(w3)
        self.pool = nn.AdaptiveAvgPool2d(cfg.latent_size)
        self.mix1 = nn.Linear(w3, cfg.n_latent)
        self.mix2 = nn.Linear(cfg.n_latent, cfg.n_latent)

    def forward(self, x):
        x = self.rb1(F.leaky_relu(self.conv_in(x), NEG_SLOPE))
        x = self.rb2(F.leaky_relu(self.down1(x), NEG_SLOPE))
        x = self.rb3(F.leaky_relu(self.down2(x), NEG_SLOPE))
        x = self.pool(x)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # (B, h*w, C)
        tokens = self.mix2(F.leaky_relu(self.mix1(tokens), NEG_SLOPE))
        return tokens.transpose(1, 2).reshape(b, -1, h, w)


class LRM(nn.Module):
    """Two-input latent encoder: ``F = LRM(decoded, original)``.

    Both images are pixel-unshuffled and concatenated (decoded channels
    first), so the first convolution's input weights split cleanly into a
    decoded branch and an original branch.
    """

    def __init__(self, cfg: LRMConfig | None = None):
        super().__init__()
        self.cfg = cfg or LRMConfig()
        branch = self.cfg.in_channels * self.cfg.pu_factor ** 2
        self.branch_channels = branch
        self.trunk = _LatentTrunk(2 * branch, self.cfg)

    def forward(self, decoded: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
        if decoded.shape != original.shape:
            raise ShapeError(f"decoded {tuple(decoded.shape)} != original {tuple(original.shape)}")
        r = self.cfg.pu_factor
        x = torch.cat([pixel_unshuffle(decoded, r), pixel_unshuffle(original, r)], dim=1)
        return self.trunk(x)


class LRMDM(nn.Module):
    """Decoded-only latent encoder producing the diffusion condition ``D``."""

    def __init__(self, cfg: LRMConfig | None = None):
        super().__init__()
        self.cfg = cfg or LRMConfig()
        self.branch_channels = self.cfg.in_channels * self.cfg.pu_factor ** 2
        self.trunk = _LatentTrunk(self.branch_channels, self.cfg)

    def forward(self, decoded: torch.Tensor) -> torch.Tensor:
        return self.trunk(pixel_unshuffle(decoded, self.cfg.pu_factor))

    @classmethod
    def from_lrm(cls, lrm: LRM) -> "LRMDM":
        """Copy LRM weights, keeping only the decoded-branch slice of the input conv."""
        dm = cls(lrm.cfg)
        state = {k: v.clone() for k, v in lrm.trunk.state_dict().items()}
        state["conv_in.weight"] = state["conv_in.weight"][:, : lrm.branch_channels].clone()
        dm.trunk.load_state_dict(state)
        return dm.to(next(lrm.parameters()).dtype)


def lrm_forward(decoded, original, model: LRM) -> torch.Tensor:
    return model(decoded, original)


def lrm_dm_forward(decoded, model: LRMDM) -> torch.Tensor:
    return model(decoded)
