"""Tiny model configurations shared by the training, CLI and acceptance tests."""
from ldmric.lrm import LRMConfig
from ldmric.men import MENConfig
from ldmric.training import LDMConfig, ModelConfig


def tiny_model(n_latent=16):
    return ModelConfig(
        lrm=LRMConfig(widths=(4, 8, 8), n_latent=n_latent),
        men=MENConfig(widths=(4, 8, 8), heads=(1, 2, 2), blocks=1, n_latent=n_latent),
        ldm=LDMConfig(hidden=16, blocks=1, heads=2),
    )


def desk_model():
    """The configuration used for the desk-scale trend runs (32x32 crops).

    The denoiser keeps its full width: its residual stream must be at least
    as wide as the latent, or it cannot represent the noise it has to remove.
    """
    return ModelConfig(
        lrm=LRMConfig(widths=(16, 32, 64)),
        men=MENConfig(widths=(8, 16, 32), heads=(1, 2, 4), blocks=1),
        ldm=LDMConfig(hidden=256),
    )
