"""Architecture contract tests: shape/range invariants, residual skip
behavior, discriminator feature geometry, parameter-count regression, and
bit-exact checkpoint round trips."""

import numpy as np
import pytest
import torch

from octadapt.data import ImageTensor, RangeTag
from octadapt.errors import ConfigError, ContractError, FormatError
from octadapt.networks import (Discriminator, DiscriminatorConfig, Generator,
                               GeneratorConfig, ResidualBlock,
                               build_discriminator, build_generator,
                               count_parameters, discriminator_forward,
                               generator_forward, load_discriminator,
                               load_generator, save_network)

SMALL_G = GeneratorConfig(base_channels=8, n_residual_blocks=2)
SMALL_D = DiscriminatorConfig(base_channels=8)


def norm_img(rng, h=32, w=32):
    vals = rng.uniform(-1, 1, size=(h, w)).astype(np.float32)
    return ImageTensor(values=vals, range_tag=RangeTag.NORM)


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(n_residual_blocks=0)
    with pytest.raises(ConfigError):
        GeneratorConfig(norm_kind="batch")
    with pytest.raises(ConfigError):
        GeneratorConfig(out_activation="sigmoid")
    with pytest.raises(ConfigError):
        DiscriminatorConfig(n_levels=0)


def test_generator_shape_and_range():
    g = build_generator(SMALL_G, seed=0)
    rng = np.random.default_rng(0)
    for h, w in ((32, 32), (64, 36), (128, 128)):
        out = generator_forward(g, norm_img(rng, h, w))
        assert out.values.shape == (h, w)
        assert out.range_tag is RangeTag.NORM
        assert out.values.min() >= -1.0 and out.values.max() <= 1.0


def test_generator_range_at_extremes():
    g = build_generator(SMALL_G, seed=1)
    for fill in (-1.0, 1.0):
        img = ImageTensor(values=np.full((32, 32), fill, dtype=np.float32),
                          range_tag=RangeTag.NORM)
        out = generator_forward(g, img)
        assert out.values.min() >= -1.0 and out.values.max() <= 1.0


def test_generator_rejects_indivisible_dims():
    g = build_generator(SMALL_G, seed=0)
    with pytest.raises(ContractError):
        g(torch.zeros(1, 1, 34, 32))
    img = ImageTensor(values=np.zeros((34, 34), dtype=np.float32),
                      range_tag=RangeTag.NORM)
    with pytest.raises(ContractError):
        generator_forward(g, img)


def test_generator_rejects_raw_input():
    g = build_generator(SMALL_G, seed=0)
    img = ImageTensor(values=np.zeros((32, 32), dtype=np.uint8),
                      range_tag=RangeTag.RAW_U8)
    with pytest.raises(ContractError):
        generator_forward(g, img)


def test_generator_gradient_matches_finite_difference():
    torch.manual_seed(0)
    g = build_generator(GeneratorConfig(base_channels=4, n_residual_blocks=1),
                        seed=3).double()
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    probe = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    param = g.model[1].weight  # ingress conv

    def scalar():
        return (g(x) * probe).sum()

    loss = scalar()
    g.zero_grad()
    loss.backward()
    grad = param.grad.clone()
    # float64 with a small step: ReLU kink crossings pollute coarser steps
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (2, 0, 3, 3), (3, 0, 6, 1)]:
        with torch.no_grad():
            orig = param[idx].item()
            param[idx] = orig + eps
            up = scalar().item()
            param[idx] = orig - eps
            down = scalar().item()
            param[idx] = orig
        fd = (up - down) / (2 * eps)
        assert fd == pytest.approx(grad[idx].item(), rel=1e-3, abs=1e-8)


def test_generator_batch_equals_looped_single():
    g = build_generator(SMALL_G, seed=5)
    g.eval()
    torch.manual_seed(2)
    batch = torch.rand(4, 1, 32, 32) * 2 - 1
    with torch.no_grad():
        together = g(batch)
        separate = torch.cat([g(batch[i:i + 1]) for i in range(4)])
    assert torch.allclose(together, separate, atol=1e-6)


def test_residual_zero_branch_is_identity():
    block = ResidualBlock(6)
    with torch.no_grad():
        block.inner[5].weight.zero_()
        block.inner[5].bias.zero_()
    x = torch.randn(2, 6, 13, 17)
    assert torch.equal(block(x), x)


def test_residual_skip_actually_applied():
    torch.manual_seed(7)
    block = ResidualBlock(4)
    x = torch.randn(1, 4, 12, 12)
    with torch.no_grad():
        with_skip = block(x)
        inner_only = block.inner(x)
    assert not torch.allclose(with_skip, inner_only)
    assert torch.allclose(with_skip, inner_only + x, atol=1e-7)


def test_residual_shape_preserved():
    block = ResidualBlock(3)
    for h, w in ((8, 8), (15, 9), (32, 64)):
        assert block(torch.randn(1, 3, h, w)).shape == (1, 3, h, w)


def test_discriminator_deterministic_in_eval():
    d = build_discriminator(SMALL_D, seed=0)
    rng = np.random.default_rng(1)
    img = norm_img(rng, 64, 64)
    s1 = discriminator_forward(d, img).score
    s2 = discriminator_forward(d, img).score
    assert torch.equal(s1, s2)
    assert torch.isfinite(s1).all()


def test_discriminator_feature_dims_follow_halving_rule():
    for n_levels in (2, 3, 4):
        d = build_discriminator(DiscriminatorConfig(base_channels=8,
                                                    n_levels=n_levels), seed=0)
        out = d(torch.zeros(1, 1, 64, 64))
        factor = 2 ** (n_levels - 1)
        assert out.features.shape[-2:] == (64 // factor, 64 // factor)
        assert out.score.shape == (1,)


def test_discriminator_score_responds_to_input():
    d = build_discriminator(SMALL_D, seed=2)
    x = torch.randn(1, 1, 32, 32, requires_grad=True)
    d(x).score.sum().backward()
    assert x.grad is not None
    assert x.grad.abs().max() > 0


def test_parameter_count_pure_function_of_config():
    counts = {
        GeneratorConfig(): 11_365_633,
        GeneratorConfig(base_channels=32, n_residual_blocks=6): 1_958_785,
    }
    for cfg, want in counts.items():
        assert count_parameters(build_generator(cfg, seed=0)) == want
        assert count_parameters(build_generator(cfg, seed=99)) == want
    assert count_parameters(build_discriminator(DiscriminatorConfig(),
                                                seed=0)) == 1_841_601
    assert count_parameters(build_discriminator(
        DiscriminatorConfig(base_channels=32), seed=1)) == 462_049


def test_forward_has_no_randomness_in_eval():
    g = build_generator(SMALL_G, seed=0)
    g.eval()
    x = torch.rand(1, 1, 32, 32) * 2 - 1
    with torch.no_grad():
        assert torch.equal(g(x), g(x))


def test_generator_checkpoint_round_trip_bit_exact(tmp_path):
    g = build_generator(SMALL_G, seed=4)
    x = torch.rand(1, 1, 32, 32) * 2 - 1
    g.eval()
    with torch.no_grad():
        before = g(x)
    path = tmp_path / "g.octc"
    save_network(path, g, SMALL_G, "generator")
    g2 = load_generator(path)
    g2.eval()
    with torch.no_grad():
        after = g2(x)
    assert torch.equal(before, after)


def test_discriminator_checkpoint_round_trip_bit_exact(tmp_path):
    d = build_discriminator(SMALL_D, seed=4)
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    d.eval()
    with torch.no_grad():
        before = d(x)
    path = tmp_path / "d.octc"
    save_network(path, d, SMALL_D, "discriminator")
    d2 = load_discriminator(path)
    d2.eval()
    with torch.no_grad():
        after = d2(x)
    assert torch.equal(before.score, after.score)
    assert torch.equal(before.features, after.features)


def test_load_wrong_kind_fails(tmp_path):
    g = build_generator(SMALL_G, seed=0)
    path = tmp_path / "g.octc"
    save_network(path, g, SMALL_G, "generator")
    with pytest.raises(FormatError):
        load_discriminator(path)


def test_load_parameter_name_mismatch_fails(tmp_path):
    from octadapt.checkpoint import load_checkpoint, save_checkpoint
    g = build_generator(SMALL_G, seed=0)
    path = tmp_path / "g.octc"
    save_network(path, g, SMALL_G, "generator")
    ckpt = load_checkpoint(path)
    ckpt.arrays["bogus.weight"] = np.zeros(3, dtype=np.float32)
    save_checkpoint(path, ckpt.kind, ckpt.meta, ckpt.arrays)
    with pytest.raises(FormatError):
        load_generator(path)
