"""Conditional latent diffusion over prior features.

Step indices are 1-based throughout: ``t`` runs over ``1..T`` and the
schedule arrays are stored with index ``t - 1``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, RangeError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    eta: np.ndarray
    gamma: np.ndarray
    gamma_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.eta)

    def check_step(self, t):
        ts = np.atleast_1d(np.asarray(t.cpu() if torch.is_tensor(t) else t))
        if ts.size == 0 or ts.min() < 1 or ts.max() > self.T:
            raise RangeError(f"step {t} outside 1..{self.T}")

    def to_dict(self) -> dict:
        return {"T": self.T, "eta": [float(e) for e in self.eta]}

    @classmethod
    def from_eta(cls, eta) -> "NoiseSchedule":
        eta = np.asarray(eta, dtype=np.float64)
        if eta.ndim != 1 or eta.size < 1 or np.any(eta <= 0) or np.any(eta >= 1):
            raise ConfigError("eta must be a nonempty 1-D array with entries in (0, 1)")
        gamma = 1.0 - eta
        return cls(eta=eta, gamma=gamma, gamma_bar=np.cumprod(gamma))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        sched = cls.from_eta(d["eta"])
        if sched.T != int(d["T"]):
            raise ConfigError(f"schedule T={d['T']} but {sched.T} eta values")
        return sched


def build_schedule(T: int = 4, gamma_bar_first: float = 0.64, gamma_bar_last: float = 0.01) -> NoiseSchedule:
    """Geometric path of cumulative signal level from ``gamma_bar_first`` to ``gamma_bar_last``.

    For ``T == 1`` the single step goes straight to ``gamma_bar_last``.
    """
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be an integer >= 1, got {T}")
    if not 0 < gamma_bar_last < gamma_bar_first < 1:
        raise ConfigError("need 0 < gamma_bar_last < gamma_bar_first < 1")
    if T == 1:
        target = np.array([gamma_bar_last])
    else:
        target = np.geomspace(gamma_bar_first, gamma_bar_last, T)
    prev = np.concatenate([[1.0], target[:-1]])
    return NoiseSchedule.from_eta(1.0 - target / prev)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at 1-based step(s) t, shaped to broadcast against ``like``."""
    if torch.is_tensor(t) and t.ndim > 0:
        idx = t.long().cpu().numpy() - 1
        out = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
        return out.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(values[int(t) - 1]), dtype=like.dtype, device=like.device)


def forward_diffuse(f0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample ``F_t = sqrt(gbar_t) F0 + sqrt(1 - gbar_t) eps``."""
    sched.check_step(t)
    if eps.shape != f0.shape:
        raise ShapeError(f"noise {tuple(eps.shape)} != features {tuple(f0.shape)}")
    gb = _coef(sched.gamma_bar, t, f0)
    return gb.sqrt() * f0 + (1 - gb).sqrt() * eps


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class _TokenBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class Denoiser(nn.Module):
    """Noise predictor over the ``h*w`` prior tokens.

    ``F_t`` and the condition ``D`` are concatenated per token, projected to
    ``hidden`` channels, shifted by a time embedding and passed through
    residual attention/MLP blocks. The output projection starts at zero.
    """

    def __init__(self, n_latent: int = 256, hidden: int = 256, blocks: int = 4, heads: int = 4,
                 tokens: int = 16):
        super().__init__()
        if hidden % heads:
            raise ConfigError(f"denoiser hidden {hidden} not divisible by {heads} heads")
        if hidden < n_latent:
            # the output is a linear map of a hidden-wide stream, so it cannot span all n_latent noise directions
            warnings.warn(f"denoiser hidden {hidden} < n_latent {n_latent}: noise prediction is rank-limited",
                          stacklevel=2)
        self.n_latent = n_latent
        self.hidden = hidden
        self.inp = nn.Linear(2 * n_latent, hidden)
        self.pos = nn.Parameter(torch.randn(1, tokens, hidden) * 0.02)
        self.time = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(_TokenBlock(hidden, heads) for _ in range(blocks))
        self.norm_out = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, n_latent)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, f_t, cond, t):
        if f_t.shape != cond.shape:
            raise ShapeError(f"F_t {tuple(f_t.shape)} != D {tuple(cond.shape)}")
        b, n, h, w = f_t.shape
        if n != self.n_latent or h * w != self.pos.shape[1]:
            raise ShapeError(f"expected ({self.n_latent}, {self.pos.shape[1]} tokens), got {tuple(f_t.shape[1:])}")
        t = torch.as_tensor(t, device=f_t.device)
        if t.ndim == 0:
            t = t.expand(b)
        tokens = torch.cat([f_t, cond], dim=1).flatten(2).transpose(1, 2)
        x = self.inp(tokens) + self.pos
        x = x + self.time(timestep_embedding(t, self.hidden).to(x.dtype))[:, None, :]
        for blk in self.blocks:
            x = blk(x)
        eps = self.out(self.norm_out(x))
        return eps.transpose(1, 2).reshape(b, n, h, w)


def denoise_predict(f_t, cond, t, model: Denoiser, sched: NoiseSchedule | None = None):
    if sched is not None:
        sched.check_step(t)
    return model(f_t, cond, t)


def reverse_step(f_t, cond, t: int, sched: NoiseSchedule, denoiser, noise=None):
    """One ancestral step ``F_t -> F_{t-1}`` with variance ``1 - gamma_t``.

    ``denoiser`` is any callable ``(F_t, D, t) -> eps``. The stochastic term
    is dropped at ``t == 1`` whatever ``noise`` holds.
    """
    sched.check_step(t)
    g = float(sched.gamma[t - 1])
    gb = float(sched.gamma_bar[t - 1])
    eps = denoiser(f_t, cond, t)
    out = (f_t - (1.0 - g) / math.sqrt(1.0 - gb) * eps) / math.sqrt(g)
    if noise is not None and t > 1:
        out = out + math.sqrt(1.0 - g) * noise
    return out


def reverse_chain(f_T, cond, sched: NoiseSchedule, denoiser, generator: torch.Generator | None = None,
                  stochastic: bool = True):
    """Run all T reverse steps from ``F_T``; fresh noise is drawn from ``generator`` for t > 1."""
    x = f_T
    for t in range(sched.T, 0, -1):
        noise = None
        if stochastic and t > 1:
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        x = reverse_step(x, cond, t, sched, denoiser, noise)
    return x


def generate_prior(decoded, lrm_dm, sched: NoiseSchedule, denoiser, seed: int = 0):
    """``F_hat = LDM(LRM_DM(decoded))`` starting from unit Gaussian noise seeded by ``seed``."""
    cond = lrm_dm(decoded)
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    f_T = torch.randn(cond.shape, generator=gen, dtype=cond.dtype).to(cond.device)
    return reverse_chain(f_T, cond, sched, denoiser, gen)


def diffusion_training_loss(f, cond, denoiser, sched: NoiseSchedule, generator=None, t=None, eps=None,
                            reduction: str = "sum"):
    """Noise-prediction loss ``||eps - eps_w(F_t, D, t)||^2``, averaged over the batch.

    ``reduction="sum"`` sums over each sample's latent entries (so a zero
    predictor scores the latent dimension in expectation); ``"mean"`` divides
    that by the dimension. ``f`` and ``cond`` are detached.
    """
    f = f.detach()
    cond = cond.detach()
    b = f.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(b)
    if eps is None:
        eps = torch.randn(f.shape, generator=generator, dtype=f.dtype)
    f_t = forward_diffuse(f, t, eps, sched)
    err = (eps - denoiser(f_t, cond, t)).pow(2).flatten(1).sum(dim=1)
    if reduction == "mean":
        err = err / f[0].numel()
    elif reduction != "sum":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return err.mean()
