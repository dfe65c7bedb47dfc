"""Multi-scale Transformer enhancement network (MEN) and its prior-fusion block.

The network is a U-shaped encoder/decoder built from channel-attention
Transformer blocks. At every decoder scale a ``DFAM`` block fuses the prior
latent into the feature map. Residual branches end in zero-initialised
projections, so a freshly built network is an exact identity on the decoded
image and ignores the prior until training moves those weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .lrm import pixel_shuffle


@dataclass
class MENConfig:
    widths: tuple = (48, 96, 192)
    blocks: int = 2
    heads: tuple = (1, 2, 4)
    ffn_expansion: float = 2.0
    prior_stages: int = 3  # K
    n_latent: int = 256
    in_channels: int = 3
    attn_reduction: int = 4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.widths) != len(self.heads):
            raise ConfigError("men.widths and men.heads must have the same length")
        if any(w <= 0 for w in self.widths) or self.blocks < 0 or self.prior_stages < 0:
            raise ConfigError("men widths must be positive; blocks and prior_stages >= 0")
        for w, h in zip(self.widths, self.heads):
            if h <= 0 or w % h:
                raise ConfigError(f"width {w} not divisible by {h} heads")

    @property
    def scales(self) -> int:
        return len(self.widths)


def _zero(module: nn.Module) -> nn.Module:
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


class LayerNorm2d(nn.Module):
    """Per-pixel normalisation over the channel axis, with learned affine."""

    def __init__(self, ch: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ChannelAttention(nn.Module):
    """Multi-head attention across channels (the attention map is C/h x C/h)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads <= 0 or dim % heads:
            raise ConfigError(f"channel count {dim} not divisible by {heads} heads")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.project_out = _zero(nn.Conv2d(dim, dim, 1))

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q, k, v = (t.reshape(b, self.heads, c // self.heads, h * w) for t in (q, k, v))
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        out = attn.softmax(dim=-1) @ v
        return self.project_out(out.reshape(b, c, h, w))


class GatedFeedForward(nn.Module):
    def __init__(self, dim: int, expansion: float):
        super().__init__()
        hidden = max(1, int(dim * expansion))
        self.project_in = nn.Conv2d(dim, hidden * 2, 1)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.project_out = _zero(nn.Conv2d(hidden, dim, 1))

    def forward(self, x):
        a, b = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(a) * b)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: channel attention, then gated feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_expansion: float = 2.0):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = ChannelAttention(dim, heads)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GatedFeedForward(dim, ffn_expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PriorUpsampler(nn.Module):
    """``stages`` x (3x3 conv -> pixel shuffle by 2); a 1x1 projection when stages == 0."""

    def __init__(self, n_latent: int, out_ch: int, stages: int):
        super().__init__()
        if stages < 0:
            raise ConfigError("stages must be >= 0")
        self.stages = stages
        if stages == 0:
            self.layers = nn.ModuleList([nn.Conv2d(n_latent, out_ch, 1)])
        else:
            chans = [n_latent] + [out_ch] * stages
            self.layers = nn.ModuleList(
                nn.Conv2d(chans[i], 4 * out_ch, 3, padding=1) for i in range(stages)
            )

    def forward(self, prior):
        x = prior
        for conv in self.layers:
            x = conv(x)
            if self.stages:
                x = pixel_shuffle(x, 2)
        return x


class DFAM(nn.Module):
    """Prior fusion: channel attention over [UP(F), Norm(M)], then a gate adjuster.

    ``M1 = Proj((FC_a(AP Z) + FC_m(MP Z)) * Z) + M`` with ``Z = [UP(F), Norm(M)]``
    and ``M2 = GU(Norm(M1) * LL_s(AP F) + LL_b(AP F)) + M1``. ``Proj`` maps the
    2C fused channels back to C. Both ``Proj`` and the gate unit's output
    projection start at zero.

    With ``resize=True`` the upsampled prior is bilinearly resized to M's
    spatial size; otherwise a size mismatch raises ShapeError.
    """

    def __init__(self, dim: int, n_latent: int, stages: int, reduction: int = 4, resize: bool = False):
        super().__init__()
        self.resize = resize
        self.up = PriorUpsampler(n_latent, dim, stages)
        self.norm_m = LayerNorm2d(dim)
        hid = max(1, 2 * dim // reduction)
        self.fc_avg = nn.Sequential(nn.Conv2d(2 * dim, hid, 1), nn.ReLU(), nn.Conv2d(hid, 2 * dim, 1))
        self.fc_max = nn.Sequential(nn.Conv2d(2 * dim, hid, 1), nn.ReLU(), nn.Conv2d(hid, 2 * dim, 1))
        self.proj = _zero(nn.Conv2d(2 * dim, dim, 1))
        self.norm_gate = LayerNorm2d(dim)
        self.ll_scale = nn.Linear(n_latent, dim)
        self.ll_shift = nn.Linear(n_latent, dim)
        self.gate_in = nn.Conv2d(dim, 2 * dim, 1)
        self.gate_out = _zero(nn.Conv2d(dim, dim, 1))

    def upsampled_prior(self, m, prior):
        up = self.up(prior)
        if up.shape[-2:] != m.shape[-2:]:
            if not self.resize:
                raise ShapeError(
                    f"upsampled prior {tuple(up.shape[-2:])} does not match features {tuple(m.shape[-2:])}"
                )
            up = F.interpolate(up, size=m.shape[-2:], mode="bilinear", align_corners=False)
        return up

    def attention_weights(self, z):
        """Per-channel weights, shape (B, 2C, 1, 1); each branch is sigmoid-squashed."""
        avg = torch.sigmoid(self.fc_avg(F.adaptive_avg_pool2d(z, 1)))
        mx = torch.sigmoid(self.fc_max(F.adaptive_max_pool2d(z, 1)))
        return avg + mx

    def forward(self, m, prior):
        z = torch.cat([self.upsampled_prior(m, prior), self.norm_m(m)], dim=1)
        m1 = self.proj(self.attention_weights(z) * z) + m

        pooled = prior.mean(dim=(2, 3))
        scale = self.ll_scale(pooled)[:, :, None, None]
        shift = self.ll_shift(pooled)[:, :, None, None]
        a, g = self.gate_in(self.norm_gate(m1) * scale + shift).chunk(2, dim=1)
        return self.gate_out(a * torch.sigmoid(g)) + m1


class MEN(nn.Module):
    """U-shaped enhancement network; returns ``decoded + residual``."""

    def __init__(self, cfg: MENConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or MENConfig()
        ws, hs, nb = cfg.widths, cfg.heads, cfg.blocks
        s = cfg.scales

        def stack(i):
            return nn.Sequential(*[TransformerBlock(ws[i], hs[i], cfg.ffn_expansion) for _ in range(nb)])

        def dfam(i):
            return DFAM(ws[i], cfg.n_latent, max(cfg.prior_stages - i, 0), cfg.attn_reduction, resize=True)

        self.embed = nn.Conv2d(cfg.in_channels, ws[0], 3, padding=1)
        self.encoders = nn.ModuleList(stack(i) for i in range(s - 1))
        self.downs = nn.ModuleList(nn.Conv2d(ws[i], ws[i + 1], 3, stride=2, padding=1) for i in range(s - 1))
        self.bottleneck = stack(s - 1)
        self.bottleneck_fuse = dfam(s - 1)
        # decoder lists are indexed by target scale i (0 = full resolution)
        self.ups = nn.ModuleList(nn.Conv2d(ws[i + 1], 4 * ws[i], 3, padding=1) for i in range(s - 1))
        self.skip_fuse = nn.ModuleList(nn.Conv2d(2 * ws[i], ws[i], 1) for i in range(s - 1))
        self.fusers = nn.ModuleList(dfam(i) for i in range(s - 1))
        self.decoders = nn.ModuleList(stack(i) for i in range(s - 1))
        self.out = _zero(nn.Conv2d(ws[0], cfg.in_channels, 3, padding=1))

    def forward(self, decoded, prior):
        s = self.cfg.scales
        h, w = decoded.shape[-2:]
        k = 2 ** (s - 1)
        if h % k or w % k:
            raise ShapeError(f"image size {h}x{w} must be divisible by {k}")
        if prior.shape[1] != self.cfg.n_latent:
            raise ShapeError(f"prior has {prior.shape[1]} channels, expected {self.cfg.n_latent}")

        x = self.embed(decoded)
        skips = []
        for enc, down in zip(self.encoders, self.downs):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck_fuse(self.bottleneck(x), prior)
        for i in reversed(range(s - 1)):
            x = pixel_shuffle(self.ups[i](x), 2)
            x = self.skip_fuse[i](torch.cat([x, skips[i]], dim=1))
            x = self.decoders[i](self.fusers[i](x, prior))
        return decoded + self.out(x)


def upsample_prior(prior, stages: int, model: PriorUpsampler | None = None, out_channels: int | None = None):
    model = model or PriorUpsampler(prior.shape[1], out_channels or prior.shape[1], stages)
    if model.stages != stages:
        raise ShapeError(f"upsampler has {model.stages} stages, asked for {stages}")
    return model(prior)


def dfam(m, prior, model: DFAM):
    return model(m, prior)


def transformer_block(m, model: TransformerBlock):
    return model(m)


def men_forward(decoded, prior, model: MEN):
    return model(decoded, prior)
