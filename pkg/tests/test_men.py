import pytest
import torch

from conftest import fd_rel_error, randomize_
from ldmric.errors import ConfigError, ShapeError
from ldmric.men import DFAM, MEN, MENConfig, PriorUpsampler, TransformerBlock, dfam, men_forward, \
    transformer_block, upsample_prior

SMALL = MENConfig(widths=(8, 16, 32), heads=(1, 2, 4), blocks=1)


def test_upsample_prior_shapes():
    f = torch.randn(2, 256, 4, 4)
    assert upsample_prior(f, 3, PriorUpsampler(256, 16, 3)).shape == (2, 16, 32, 32)
    assert upsample_prior(f, 0, PriorUpsampler(256, 16, 0)).shape == (2, 16, 4, 4)
    assert PriorUpsampler(256, 8, 1)(f).shape == (2, 8, 8, 8)


def test_dfam_identity_at_init():
    m = torch.randn(2, 16, 32, 32)
    f = torch.randn(2, 256, 4, 4)
    block = DFAM(16, 256, 3)
    assert torch.equal(dfam(m, f, block), m)
    assert torch.equal(dfam(m, 10 * f + 3, block), m)


def test_dfam_residual_paths_separately():
    m = torch.randn(1, 16, 32, 32)
    f = torch.randn(1, 256, 4, 4)
    block = randomize_(DFAM(16, 256, 3), 0.2)
    with torch.no_grad():
        block.gate_out.weight.zero_()
        block.gate_out.bias.zero_()
    z = torch.cat([block.upsampled_prior(m, f), block.norm_m(m)], 1)
    m1 = block.proj(block.attention_weights(z) * z) + m
    torch.testing.assert_close(block(m, f), m1, rtol=0, atol=1e-6)
    with torch.no_grad():
        block.proj.weight.zero_()
        block.proj.bias.zero_()
    assert torch.equal(block(m, f), m)


def test_attention_weights_are_per_channel_and_bounded():
    block = randomize_(DFAM(8, 256, 1), 1.0)
    z = torch.randn(3, 16, 8, 8) * 5
    w = block.attention_weights(z)
    assert w.shape == (3, 16, 1, 1)
    assert torch.all(w > 0) and torch.all(w < 2)


def test_dfam_spatial_mismatch():
    with pytest.raises(ShapeError):
        DFAM(16, 256, 2)(torch.randn(1, 16, 32, 32), torch.randn(1, 256, 4, 4))


def test_transformer_block_identity_and_batch_independence():
    blk = TransformerBlock(16, 2)
    m = torch.randn(4, 16, 8, 8)
    assert torch.equal(transformer_block(m, blk), m)
    randomize_(blk, 0.3)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(blk(m)[perm], blk(m[perm]))


def test_transformer_block_head_divisibility():
    with pytest.raises(ConfigError):
        TransformerBlock(10, 3)
    with pytest.raises(ConfigError):
        MENConfig(widths=(8, 16, 30), heads=(1, 2, 4))


def test_transformer_block_gradients():
    blk = randomize_(TransformerBlock(16, 2).double(), 0.2)
    m = torch.randn(1, 16, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 16, 8, 8, dtype=torch.float64)

    def loss():
        return (blk(m) * w).sum()

    params = [m, blk.attn.qkv.weight, blk.attn.temperature, blk.attn.project_out.weight,
              blk.ffn.dwconv.weight, blk.ffn.project_out.weight, blk.norm1.weight]
    assert fd_rel_error(loss, params) < 1e-3


def test_dfam_gradients():
    block = randomize_(DFAM(8, 16, 2).double(), 0.3)
    m = torch.randn(1, 8, 16, 16, dtype=torch.float64, requires_grad=True)
    f = torch.randn(1, 16, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 8, 16, 16, dtype=torch.float64)

    def loss():
        return (block(m, f) * w).sum()

    params = [m, f, block.up.layers[0].weight, block.fc_avg[0].weight, block.fc_max[2].weight,
              block.proj.weight, block.ll_scale.weight, block.ll_shift.bias, block.gate_in.weight,
              block.gate_out.weight]
    assert fd_rel_error(loss, params) < 1e-3


def test_men_identity_at_init():
    men = MEN(SMALL)
    y = torch.rand(2, 3, 64, 64)
    assert torch.equal(men_forward(y, torch.randn(2, 256, 4, 4), men), y)


@pytest.mark.parametrize("size", [64, 96, 128])
def test_men_shape_preservation(size):
    men = randomize_(MEN(SMALL), 0.05)
    y = torch.rand(1, 3, size, size)
    assert men(y, torch.randn(1, 256, 4, 4)).shape == y.shape


def test_zero_prior_neutrality_with_fusion_at_init():
    # train-like perturbation of everything except the fusion layers' zero projections
    men = MEN(SMALL)
    with torch.no_grad():
        men.out.weight.normal_(0, 0.1)
    y = torch.rand(1, 3, 32, 32)
    a = men(y, torch.randn(1, 256, 4, 4))
    b = men(y, torch.randn(1, 256, 4, 4) * 5)
    assert not torch.equal(a, y)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


def test_men_rejects_bad_sizes():
    men = MEN(SMALL)
    with pytest.raises(ShapeError):
        men(torch.rand(1, 3, 30, 30), torch.randn(1, 256, 4, 4))
    with pytest.raises(ShapeError):
        men(torch.rand(1, 3, 32, 32), torch.randn(1, 128, 4, 4))
