import numpy as np
import pytest

from trikd.autodiff import Tensor, no_grad, ops
from trikd.config import DESK, FULL
from trikd.encoders import (
    AttentionMap,
    ConvNetEncoder,
    FeaturePyramid,
    HybridEncoder,
    LowLevelProjector,
    ViTEncoder,
    encoder_parameter_counts,
    pyramid_schedule,
)
from trikd.nn import TransformerBlock


@pytest.fixture(scope="module")
def x64():
    return Tensor(np.random.default_rng(7).random((2, 3, 64, 64)))


def test_conv_pyramid_shapes(x64):
    pyr = ConvNetEncoder(DESK, np.random.default_rng(0))(x64)
    assert [t.shape[1:] for t in pyr.stages] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]


def test_conv_encoder_deterministic(x64):
    a = ConvNetEncoder(DESK, np.random.default_rng(3))(x64)
    b = ConvNetEncoder(DESK, np.random.default_rng(3))(x64)
    for s, t in zip(a.stages, b.stages):
        assert np.array_equal(s.data, t.data)


def test_conv_rejects_indivisible_extent():
    with pytest.raises(ValueError, match="divisible by 32"):
        ConvNetEncoder(DESK, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 48, 64))))


def test_conv_zero_input_zero_final_block():
    enc = ConvNetEncoder(DESK, np.random.default_rng(0))
    enc.train(False)
    for m in enc.parameters():
        m.data = np.zeros(m.shape)
    out = enc(Tensor(np.zeros((1, 3, 64, 64))))
    for t in out.stages:
        assert np.all(t.data == 0)


def test_vit_tokens_and_attention(x64):
    tokens, pyr, att = ViTEncoder(DESK, np.random.default_rng(0))(x64)
    assert len(tokens) == 4 and tokens[0].shape == (2, 64, 64)
    assert [t.shape[1:] for t in pyr.stages] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    att.validate()
    assert att.tokens == 64


def test_vit_token_count_mismatch_rejected():
    enc = ViTEncoder(DESK, np.random.default_rng(0))
    with pytest.raises(ValueError, match="position"):
        enc.embed(Tensor(np.zeros((1, 3, 128, 128))))


def test_vit_taps_quarter_points():
    assert DESK.vit_taps() == (1, 2, 3, 4)
    assert FULL.vit_taps() == (3, 6, 9, 12)
    assert DESK.vit_tokens == 64


def test_zero_branch_block_is_identity(rng):
    blk = TransformerBlock(8, 2, rng=rng)
    blk.zero_residual_branches()
    x = rng.normal(size=(2, 5, 8))
    out, att = blk(Tensor(x))
    np.testing.assert_array_equal(out.data, x)
    AttentionMap(att, "vit", 1).validate()


def test_hybrid_shapes_and_tokens(x64):
    pyr, att, f1 = HybridEncoder(DESK, np.random.default_rng(0))(x64)
    assert [t.shape[1:] for t in pyr.stages] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert [t.shape[2] * t.shape[3] for t in pyr.stages[1:]] == [64, 16, 4]
    att.validate()
    assert att.tokens == 4 and f1 is pyr.stages[0]


def test_hybrid_zero_blocks_pass_downsampled_features(x64):
    enc = HybridEncoder(DESK, np.random.default_rng(0))
    for blocks in enc.stages:
        for blk in blocks:
            blk.zero_residual_branches()
    pyr, _, f1 = enc(x64)
    h = f1
    for k in range(3):
        h = enc.down_bns[k](enc.downs[k](h))
        np.testing.assert_allclose(pyr.stages[k + 1].data, h.data, atol=1e-12)


def test_projector_zero_case(rng):
    proj = LowLevelProjector(4, 6, rng)
    proj.conv.weight.data = np.zeros((6, 4, 1, 1))
    proj.conv.bias.data = np.zeros(6)
    out = proj(Tensor(rng.normal(size=(2, 4, 4, 4))))
    assert out.shape == (2, 6, 4, 4) and np.all(out.data == 0)


def test_projector_stepwise_oracle(rng):
    proj = LowLevelProjector(4, 3, rng)
    x = rng.normal(size=(2, 4, 4, 4))
    y = np.einsum("oc,bchw->bohw", proj.conv.weight.value[:, :, 0, 0], x) + proj.conv.bias.value[None, :, None, None]
    mu, var = y.mean((0, 2, 3), keepdims=True), y.var((0, 2, 3), keepdims=True)
    ref = np.maximum((y - mu) / np.sqrt(var + 1e-5), 0)
    np.testing.assert_allclose(proj(Tensor(x)).data, ref, atol=1e-12)


def test_projector_matches_conv_stage_one_width():
    assert LowLevelProjector(DESK.hyb_widths[0], DESK.cnn_widths[0]).conv.weight.shape[0] == 16


def test_projector_rejects_spatial_mismatch(rng):
    with pytest.raises(ValueError):
        LowLevelProjector(4, 3, rng)(Tensor(rng.normal(size=(1, 4, 8, 8))), expected_hw=(16, 16))


def test_attention_map_validation():
    with pytest.raises(ValueError):
        AttentionMap(Tensor(np.full((3, 3), 0.5)), "vit", 1).validate()


def test_pyramid_schedule_validation():
    good = [Tensor(np.zeros((1, c, h, h))) for c, h in ((2, 8), (4, 4), (8, 2), (16, 1))]
    FeaturePyramid(good, pyramid_schedule(32, (2, 4, 8, 16))).validate()
    with pytest.raises(ValueError):
        FeaturePyramid(good, pyramid_schedule(32, (2, 4, 8, 32))).validate()


@pytest.mark.parametrize("cfg", [DESK, FULL], ids=["desk", "full"])
def test_shape_only_dry_run(cfg):
    """Both presets declare consistent schedules without allocating weights."""
    for enc in (ConvNetEncoder(cfg), ViTEncoder(cfg), HybridEncoder(cfg)):
        assert enc.num_parameters() > 0
    sched = pyramid_schedule(cfg.image_size, cfg.cnn_widths)
    for s in range(1, 4):
        assert sched[s][0] * 2 == sched[s - 1][0]
        assert sched[s][2] == 2 * sched[s - 1][2]


def test_full_hybrid_is_smallest():
    counts = encoder_parameter_counts(FULL)
    assert counts["hybrid"] < counts["cnn"]
    assert counts["hybrid"] < counts["vit"]


def test_full_preset_values():
    assert (FULL.vit_patch, FULL.vit_dim, FULL.vit_depth, FULL.vit_heads) == (16, 768, 12, 12)
    assert FULL.cnn_widths[0] == 256
    assert FULL.hyb_widths[0] == 64 and FULL.hyb_widths[3] == 448 and FULL.hyb_heads[-1] == 14
