# %% [markdown]
# # A short diffusion chain over a 4x4 latent
#
# The prior lives in a tiny latent (N channels on a 4x4 grid), so a handful of
# diffusion steps is enough. This notebook walks through the schedule, the
# forward marginal and an exact reverse chain.

# %%
import math

import torch

from ldmric.ldm import build_schedule, forward_diffuse, reverse_chain

sched = build_schedule(4)
print("eta      ", sched.eta.round(4))
print("gamma_bar", sched.gamma_bar.round(4))

# %% [markdown]
# `gamma_bar` falls geometrically from 0.64 to 0.01, so by the last step only
# a tenth of the clean signal's amplitude survives.
#
# The forward marginal at step t is Gaussian with mean `sqrt(gamma_bar_t) * F0`
# and variance `1 - gamma_bar_t`. A quick Monte-Carlo check:

# %%
gen = torch.Generator().manual_seed(0)
f0 = torch.full((20_000, 1, 1, 1), 1.5, dtype=torch.float64)
for t in range(1, 5):
    x = forward_diffuse(f0, t, torch.randn(f0.shape, generator=gen, dtype=torch.float64), sched)
    print(t, round(x.mean().item(), 4), round(math.sqrt(sched.gamma_bar[t - 1]) * 1.5, 4),
          round(x.var().item(), 4), round(1 - sched.gamma_bar[t - 1], 4))

# %% [markdown]
# If the denoiser knew the noise that was injected at every step, the reverse
# chain (with its stochastic term switched off) would walk straight back to F0.

# %%
f = [torch.randn(1, 256, 4, 4, generator=gen)]
for t in range(1, 5):
    f.append(math.sqrt(sched.gamma[t - 1]) * f[-1]
             + math.sqrt(sched.eta[t - 1]) * torch.randn(f[0].shape, generator=gen))


def oracle(f_t, _cond, t):
    injected = f_t - math.sqrt(sched.gamma[t - 1]) * f[t - 1]
    return injected * math.sqrt(1 - sched.gamma_bar[t - 1]) / (1 - sched.gamma[t - 1])


rec = reverse_chain(f[-1], None, sched, oracle, stochastic=False)
print("max abs error", (rec - f[0]).abs().max().item())
