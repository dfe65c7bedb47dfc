# %% [markdown]
# # Two-stage training on a handful of crops
#
# Stage I learns a compression prior F from the decoded image *and* the
# original, together with the enhancement network MEN. Stage II freezes that
# prior extractor and teaches a small diffusion model to produce F from the
# decoded image alone. The networks below are tiny so the whole thing runs in
# about a minute on one CPU core; expect modest numbers.

# %%
import numpy as np

from ldmric import psnr
from ldmric.data import synthetic_dataset
from ldmric.lrm import LRMConfig
from ldmric.men import MENConfig
from ldmric.training import (LDMConfig, ModelConfig, Stage2Models, TrainConfig, enhance, enhance_stage1,
                             prior_gap, train_stage1, train_stage2)

data = synthetic_dataset(4, 32, q=0.2, seed=0)
model = ModelConfig(
    lrm=LRMConfig(widths=(8, 16, 32), n_latent=64),
    men=MENConfig(widths=(8, 16, 32), heads=(1, 2, 4), blocks=1, n_latent=64),
    ldm=LDMConfig(hidden=64, blocks=2),
)
print("decoded PSNR", np.mean([psnr(s.decoded, s.original) for s in data]))

# %% [markdown]
# MEN starts as the identity (its output projection is zero), so the first
# Stage-I loss is just the mean absolute coding error.

# %%
ck1, hist1 = train_stage1(data, model, TrainConfig(stage=1, lr=1e-3, iterations=300, patience=None))
print("loss", hist1.losses[0], "->", np.mean(hist1.losses[-20:]))
print("stage I PSNR", np.mean([psnr(enhance_stage1(s.decoded, s.original, ck1), s.original) for s in data]))

# %% [markdown]
# Stage II: the gap between the generated prior and the Stage-I prior should
# shrink as the denoiser and the decoded-only extractor learn.

# %%
before = prior_gap(data, Stage2Models.from_stage1(ck1))
ck2, hist2 = train_stage2(data, ck1, TrainConfig(stage=2, lr=1e-3, iterations=300, schedule="step"))
after = prior_gap(data, Stage2Models.from_checkpoint(ck2))
print(f"prior gap {before:.3f} -> {after:.3f}")
print("stage II PSNR", np.mean([psnr(enhance(s.decoded, ck2, seed=i), s.original) for i, s in enumerate(data)]))
