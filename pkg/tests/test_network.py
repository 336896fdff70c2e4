import numpy as np
import pytest
import torch

from crosscal.network import (
    CalibrationNet,
    NetworkConfig,
    QueryEncoder,
    WindowedCorrelation,
    desk_scale,
    tiny,
)
from crosscal.network.transformer import CrossAttention, DenseRaise, SwinBlock
from oracles import correlation_volume_loops


def make_inputs(cfg, batch=1, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    w, h = cfg.input_wh
    cam = torch.rand(batch, 3, h, w, generator=g, dtype=dtype)
    lidar = torch.rand(batch, 2, h, w, generator=g, dtype=dtype)
    return cam, lidar


# ------------------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(ValueError, match="upsample"):
        NetworkConfig(upsample_rate=3)
    with pytest.raises(ValueError, match="use_encoder"):
        NetworkConfig(use_encoder=True, use_transformer=False)
    with pytest.raises(ValueError, match="divisible"):
        NetworkConfig(d_k=10, num_heads=4)
    with pytest.raises(ValueError, match="stride"):
        NetworkConfig(input_wh=(100, 60))


def test_config_feature_shapes():
    assert NetworkConfig(input_wh=(512, 256), upsample_rate=4).feature_wh == (64, 32)
    assert NetworkConfig(input_wh=(512, 256), upsample_rate=1, use_encoder=False).feature_wh == (16, 8)


def test_config_roundtrip_dict():
    cfg = desk_scale()
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg


# ---------------------------------------------------------------- features


def test_extract_features_shapes_full_scale():
    cfg = NetworkConfig(input_wh=(512, 256), upsample_rate=4, width_mult=0.125, feature_dim=8)
    model = CalibrationNet(cfg).eval()
    cam, lidar = make_inputs(cfg)
    with torch.no_grad():
        f_cam, f_lidar = model.extract_features(cam, lidar)
    assert f_cam.shape == (1, 8, 32, 64)
    assert f_lidar.shape == (1, 8, 32, 64)


def test_extract_features_stride_32_without_upsampling():
    cfg = NetworkConfig(
        input_wh=(512, 256), upsample_rate=1, width_mult=0.125, feature_dim=8, use_encoder=False
    )
    model = CalibrationNet(cfg).eval()
    cam, lidar = make_inputs(cfg)
    with torch.no_grad():
        f_cam, _ = model.extract_features(cam, lidar)
    assert f_cam.shape == (1, 8, 8, 16)


def test_zero_input_gives_finite_features():
    cfg = tiny()
    model = CalibrationNet(cfg).eval()
    w, h = cfg.input_wh
    with torch.no_grad():
        f_cam, f_lidar = model.extract_features(torch.zeros(1, 3, h, w), torch.zeros(1, 2, h, w))
        t, q = model(torch.zeros(1, 3, h, w), torch.zeros(1, 2, h, w))
    for tensor in (f_cam, f_lidar, t, q):
        assert torch.isfinite(tensor).all()


# -------------------------------------------------------------- pose query


def test_query_pool_of_constant_map():
    cfg = tiny()
    enc = QueryEncoder(cfg).eval()
    c = enc.backbone.stage_channels[-1]
    const = torch.full((1, c, 4, 6), 0.37)
    with torch.no_grad():
        pooled = const.mean(dim=(2, 3))
        assert torch.allclose(pooled, const[:, :, 0, 0])
        out = enc.from_features(const)
        single = enc.from_features(const[:, :, :1, :1])
    assert torch.allclose(out, single, atol=1e-6)


def test_query_pooling_permutation_invariance():
    cfg = tiny()
    enc = QueryEncoder(cfg).eval()
    c = enc.backbone.stage_channels[-1]
    g = torch.Generator().manual_seed(3)
    feat = torch.rand(1, c, 4, 6, generator=g)
    perm = torch.randperm(24, generator=g)
    shuffled = feat.flatten(2)[:, :, perm].view(1, c, 4, 6)
    with torch.no_grad():
        assert torch.allclose(enc.from_features(feat), enc.from_features(shuffled), atol=1e-6)


def test_query_shape_and_finiteness():
    cfg = tiny()
    enc = QueryEncoder(cfg).eval()
    w, h = cfg.input_wh
    with torch.no_grad():
        out = enc(torch.rand(2, 3, h, w))
    assert out.shape == (2, cfg.d_k)
    assert torch.isfinite(out).all()


# -------------------------------------------------------------- correlation


def test_correlation_channel_count_law():
    for radius in (1, 2, 3, 4):
        for heads in (1, 2, 4):
            corr = WindowedCorrelation(8, 16 * heads, heads, radius, multihead=True)
            x = torch.rand(1, 8, 6, 5)
            out = corr(x, torch.rand(1, 8, 6, 5))
            expected = (2 * radius + 1) ** 2 * heads
            assert corr.out_channels == expected
            assert out.shape == (1, expected, 6, 5)


def test_correlation_full_scale_channel_count():
    corr = WindowedCorrelation(8, 16, 4, 4, multihead=True)
    assert corr.out_channels == 324  # (2*4+1)^2 * 4


def test_correlation_matches_loop_oracle():
    g = torch.Generator().manual_seed(5)
    for radius in (1, 2):
        for heads in (1, 2):
            d_k = 8 * heads
            corr = WindowedCorrelation(6, d_k, heads, radius, multihead=True).double()
            f_q = torch.rand(1, 6, 8, 8, generator=g, dtype=torch.float64)
            f_k = torch.rand(1, 6, 8, 8, generator=g, dtype=torch.float64)
            with torch.no_grad():
                out = corr(f_q, f_k)[0].numpy()
                q = corr.proj_q(f_q)[0].reshape(heads, d_k // heads, 8, 8).numpy()
                k = corr.proj_k(f_k)[0].reshape(heads, d_k // heads, 8, 8).numpy()
            oracle = correlation_volume_loops(q, k, radius, np.sqrt(d_k / heads))
            np.testing.assert_allclose(out, oracle, rtol=1e-5, atol=1e-12)


def test_correlation_identity_projection_self_product():
    corr = WindowedCorrelation(7, 7, 1, 1, multihead=False)
    g = torch.Generator().manual_seed(6)
    feat = torch.randn(2, 7, 5, 9, generator=g)
    with torch.no_grad():
        out = corr(feat, feat)
    center = (2 * 1 + 1) ** 2 // 2  # offset (0, 0) channel
    expected = feat.pow(2).sum(1) / np.sqrt(7)
    assert torch.allclose(out[:, center], expected, atol=1e-5)
    assert (out[:, center] >= 0).all()


def test_correlation_boundary_law():
    radius = 2
    corr = WindowedCorrelation(4, 8, 2, radius, multihead=True)
    g = torch.Generator().manual_seed(7)
    f_q = torch.randn(1, 4, 7, 7, generator=g)
    f_k = torch.randn(1, 4, 7, 7, generator=g)
    with torch.no_grad():
        out = corr(f_q, f_k)[0]
    side = 2 * radius + 1
    for yy in range(7):
        for xx in range(7):
            for head in range(2):
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        ch = head * side * side + (dy + radius) * side + (dx + radius)
                        oob = not (0 <= yy + dy < 7 and 0 <= xx + dx < 7)
                        if oob:
                            assert out[ch, yy, xx] == 0.0


def test_correlation_shape_mismatch():
    corr = WindowedCorrelation(4, 8, 2, 1)
    with pytest.raises(ValueError, match="differ"):
        corr(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 6))


# ------------------------------------------------------------- transformer


def test_encoder_token_count_and_bypass():
    cfg = tiny()
    model = CalibrationNet(cfg).eval()
    fw, fh = cfg.feature_wh
    corr = torch.rand(1, model.correlation.out_channels, fh, fw)
    with torch.no_grad():
        memory, (h, w) = model.encoder(corr)
    assert memory.shape == (1, fh * fw, cfg.d_k)
    assert (h, w) == (fh, fw)

    cfg_bypass = tiny()
    cfg_bypass.use_encoder = False
    model2 = CalibrationNet(cfg_bypass).eval()
    with torch.no_grad():
        raised = model2.encoder.raise_dim(corr)
        memory2, _ = model2.encoder(corr)
    assert torch.equal(memory2, raised.flatten(2).transpose(1, 2))


def test_encoder_attention_rows_sum_to_one():
    cfg = tiny()
    cfg.encoder_layers = 2  # exercise both plain and shifted blocks
    model = CalibrationNet(cfg)
    model.set_record_attention(True)
    model.eval()
    cam, lidar = make_inputs(cfg, seed=8)
    with torch.no_grad():
        model(cam, lidar)
    checked = 0
    for block in model.encoder.blocks:
        attn = block.attn.last_attention
        assert attn is not None
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        checked += 1
    assert checked == 2


def test_decoder_attention_rows_sum_to_one():
    cfg = tiny()
    model = CalibrationNet(cfg)
    model.set_record_attention(True)
    model.eval()
    cam, lidar = make_inputs(cfg, seed=9)
    with torch.no_grad():
        model(cam, lidar)
    for layer in model.decoder.layers:
        attn = layer.attn.last_attention
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)


def test_cross_attention_identical_values_collapse():
    # when every memory token is the same vector, attention output cannot
    # depend on the weights: it equals the single-token case
    attn = CrossAttention(16, 2).eval()
    g = torch.Generator().manual_seed(10)
    query = torch.randn(1, 1, 16, generator=g)
    token = torch.randn(1, 1, 16, generator=g)
    many = token.expand(1, 40, 16)
    with torch.no_grad():
        out_many = attn(query, many, many)
        out_one = attn(query, token, token)
    assert torch.allclose(out_many, out_one, atol=1e-6)


def test_dense_raise_output_channels():
    raise_dim = DenseRaise(50, 64, num_layers=2, growth=32)
    out = raise_dim(torch.rand(1, 50, 8, 8))
    assert out.shape == (1, 64, 8, 8)


def test_swin_block_preserves_shape():
    block = SwinBlock(16, 2, window=4, shifted=True)
    x = torch.rand(2, 8 * 4, 16)
    assert block(x, 4, 8).shape == x.shape


# ------------------------------------------------------------------ heads


def test_head_normalization_examples():
    from crosscal.torch_quat import normalize_canonical

    q = normalize_canonical(torch.tensor([[2.0, 0.0, 0.0, 0.0]]))
    assert torch.allclose(q, torch.tensor([[1.0, 0, 0, 0]]))
    q = normalize_canonical(torch.tensor([[-1.0, 0.0, 0.0, 0.0]]))
    assert torch.allclose(q, torch.tensor([[1.0, 0, 0, 0]]))


def test_forward_output_contract():
    cfg = tiny()
    model = CalibrationNet(cfg).eval()
    cam, lidar = make_inputs(cfg, batch=3, seed=11)
    with torch.no_grad():
        t, q = model(cam, lidar)
    assert t.shape == (3, 3)
    assert q.shape == (3, 4)
    assert torch.allclose(q.norm(dim=-1), torch.ones(3), atol=1e-6)
    assert (q[:, 0] >= 0).all()


def test_forward_deterministic_in_eval():
    cfg = tiny()
    model = CalibrationNet(cfg).eval()
    cam, lidar = make_inputs(cfg, seed=12)
    with torch.no_grad():
        t1, q1 = model(cam, lidar)
        t2, q2 = model(cam, lidar)
    assert torch.equal(t1, t2)
    assert torch.equal(q1, q2)


def test_no_transformer_ablation_path():
    cfg = tiny()
    cfg.use_transformer = False
    cfg.use_encoder = False
    model = CalibrationNet(cfg).eval()
    assert not hasattr(model, "decoder")
    cam, lidar = make_inputs(cfg, seed=13)
    with torch.no_grad():
        t, q = model(cam, lidar)
    assert t.shape == (1, 3)
    assert torch.allclose(q.norm(dim=-1), torch.ones(1), atol=1e-6)


def test_no_multihead_ablation_path():
    cfg = tiny()
    cfg.use_multihead = False
    model = CalibrationNet(cfg).eval()
    assert model.correlation.out_channels == (2 * cfg.window_radius + 1) ** 2
    cam, lidar = make_inputs(cfg, seed=14)
    with torch.no_grad():
        t, q = model(cam, lidar)
    assert t.shape == (1, 3)


def test_gradient_reaches_every_parameter():
    cfg = tiny()
    model = CalibrationNet(cfg)
    model.train()
    cam, lidar = make_inputs(cfg, batch=2, seed=15)
    t, q = model(cam, lidar)
    loss = t.pow(2).sum() + q[:, 1:].pow(2).sum() + (q[:, 0] - 1).pow(2).sum()
    loss.backward()
    dead = [
        name
        for name, p in model.named_parameters()
        if p.grad is None or not torch.isfinite(p.grad).all()
    ]
    assert not dead, f"parameters without finite gradients: {dead}"
    zero = [
        name
        for name, p in model.named_parameters()
        if p.grad is not None and p.grad.abs().max() == 0
    ]
    # at most the occasional bias may sit at an exact zero of its activation;
    # whole-module dead branches are the failure mode guarded against here
    assert len(zero) <= 2, f"suspiciously many zero-gradient parameters: {zero}"


def test_predict_returns_canonical_pose():
    from crosscal.dataio import PreprocessSpec, RawFrame, make_sample
    from crosscal.dataio.synth import SynthSceneParams, synth_scene
    from crosscal.geometry import DeviationRange

    cfg = tiny()
    model = CalibrationNet(cfg)
    w, h = cfg.input_wh
    image, cloud, intr, t_lc = synth_scene(2, 500, SynthSceneParams(width=w, height=h))
    frame = RawFrame("f", image, cloud, intr, t_lc)
    sample = make_sample(frame, DeviationRange(0.1, 2.0), 3, PreprocessSpec((w, h), (w, h)))
    pred = model.predict(sample)
    assert pred.translation.shape == (3,)
    assert pred.rotation.w >= 0
    assert abs(pred.rotation.norm() - 1.0) < 1e-6
