"""Network-level tests: granularity schedule, shape contracts, block oracle,
cost accounting vs live enumeration, checkpoints, ablations, determinism."""

import dataclasses

import numpy as np
import pytest

from test_nn import attention_oracle, lstm_loop_oracle
from sandglasset.errors import ConfigError, LayoutError
from sandglasset.framing import make_frame_layout, make_segment_layout
from sandglasset.model import (
    ModelConfig,
    ModelParams,
    count_parameters,
    decode,
    encode,
    estimate_flops,
    forward,
    forward_block,
    granularity_factors,
    load_checkpoint,
    mask_head,
    pair_block,
    paper_config,
    san_flops,
    save_checkpoint,
    small_config,
    tiny_config,
)
from sandglasset.nn import linear, positional_encoding
from sandglasset.optim import grad_check
from sandglasset.tensor import RngState, Tensor
from sandglasset.training import batch_loss, make_mixture, make_speaker_pool


class TestGranularityFactors:
    def test_published_schedule(self):
        assert granularity_factors(6) == [4, 16, 64, 64, 16, 4]

    def test_two_blocks(self):
        assert granularity_factors(2) == [4, 4]

    def test_four_blocks(self):
        assert granularity_factors(4) == [4, 16, 16, 4]

    def test_odd_count_rejected(self):
        with pytest.raises(ConfigError):
            granularity_factors(5)

    def test_mirror_pairing_preserves_granularity(self):
        for blocks in (2, 4, 6, 8):
            factors = granularity_factors(blocks)
            for b in range(blocks // 2 + 1, blocks + 1):
                partner = pair_block(b, blocks, "mirror")
                assert factors[partner - 1] == factors[b - 1]

    def test_offset_pairing_is_the_alternative(self):
        assert pair_block(4, 6, "offset") == 1
        assert pair_block(6, 6, "offset") == 3


class TestConfigs:
    def test_paper_defaults(self):
        cfg = paper_config()
        assert (cfg.window_len, cfg.encoder_dim, cfg.bottleneck_dim) == (4, 256, 128)
        assert (cfg.segment_size, cfg.num_blocks, cfg.lstm_hidden) == (256, 6, 128)
        assert (cfg.num_heads, cfg.dropout) == (8, 0.1)

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_blocks=3).validate()
        with pytest.raises(ConfigError):
            ModelConfig(bottleneck_dim=130, num_heads=8).validate()
        with pytest.raises(ConfigError):
            ModelConfig(segment_size=32).validate()  # largest factor 64
        with pytest.raises(ConfigError):
            ModelConfig(num_sources=1).validate()
        with pytest.raises(ConfigError):
            ModelConfig(residual_pairing="ring").validate()


class TestEncode:
    def test_zero_waveform_zero_bias_gives_zeros(self):
        cfg = tiny_config(encoder_bias=False)
        params = ModelParams.initialize(cfg, seed=1)
        encoded, bottleneck, _ = encode(np.zeros(64, dtype=np.float32), params, cfg)
        np.testing.assert_array_equal(encoded.data, 0)
        np.testing.assert_array_equal(bottleneck.data, 0)

    def test_encoded_features_non_negative(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=2)
        rng = np.random.default_rng(0)
        encoded, _, _ = encode(rng.standard_normal(200).astype(np.float32), params, cfg)
        assert np.all(encoded.data >= 0)

    def test_published_dimensions_at_8khz(self):
        cfg = paper_config()
        params = ModelParams.initialize(cfg, seed=0)
        x = np.zeros(8000, dtype=np.float32)
        encoded, bottleneck, layout = encode(x, params, cfg)
        assert layout.num_frames == 4000
        assert encoded.shape == (256, 4000)
        assert bottleneck.shape == (128, 4000)


def block_oracle(x, bp, num_heads, eps=1e-5):
    """Straight-line reimplementation of one block with explicit loops."""
    d, k, s = x.shape
    factor = bp.factor
    hidden = bp.lstm.fwd.w_hh.shape[1]

    lstm_out = np.zeros((2 * hidden, k, s))
    for seg in range(s):
        lstm_out[:hidden, :, seg] = lstm_loop_oracle(
            x[:, :, seg], bp.lstm.fwd.w_ih.data, bp.lstm.fwd.w_hh.data,
            bp.lstm.fwd.bias.data, reverse=False)
        lstm_out[hidden:, :, seg] = lstm_loop_oracle(
            x[:, :, seg], bp.lstm.bwd.w_ih.data, bp.lstm.bwd.w_hh.data,
            bp.lstm.bwd.bias.data, reverse=True)

    y_lr = np.zeros((d, k, s))
    for kk in range(k):
        for seg in range(s):
            y_lr[:, kk, seg] = bp.proj_w.data @ lstm_out[:, kk, seg] + bp.proj_b.data

    x_ga = np.zeros_like(y_lr)
    for kk in range(k):
        for seg in range(s):
            col = y_lr[:, kk, seg]
            mu, var = col.mean(), ((col - col.mean()) ** 2).mean()
            x_ga[:, kk, seg] = (bp.norm_lr_gain.data * (col - mu) / np.sqrt(var + eps)
                                + bp.norm_lr_offset.data + x[:, kk, seg])

    k_ds = k // factor
    down = np.zeros((d, k_ds, s))
    for kk in range(k_ds):
        for t in range(factor):
            down[:, kk, :] += bp.ds_kernel.data[:, t][:, None] * x_ga[:, kk * factor + t, :]

    pe = positional_encoding(s, d, dtype=np.float64).data
    attn_arrays = {
        "w_q": bp.san.w_q.data, "b_q": bp.san.b_q.data,
        "w_k": bp.san.w_k.data, "b_k": bp.san.b_k.data,
        "w_v": bp.san.w_v.data, "b_v": bp.san.b_v.data,
        "w_out": bp.san.w_out.data,
        "ln_gain": bp.san.ln_gain.data,
        "ln_offset": bp.san.ln_offset.data,
    }
    attended = np.zeros_like(down)
    for kk in range(k_ds):
        seq = down[:, kk, :]  # [D, S]
        mu = seq.mean(axis=0)
        var = ((seq - mu) ** 2).mean(axis=0)
        normed = (bp.san_pre_gain.data[:, None] * (seq - mu) / np.sqrt(var + eps)
                  + bp.san_pre_offset.data[:, None])
        attended[:, kk, :] = attention_oracle(normed + pe, attn_arrays, num_heads, eps)

    up = np.zeros((d, k, s))
    for kk in range(k_ds):
        for t in range(factor):
            up[:, kk * factor + t, :] += bp.us_kernel.data[:, t][:, None] * attended[:, kk, :]
    return up


class TestForwardBlock:
    def test_output_shape_matches_input(self):
        rng = np.random.default_rng(0)
        for seed in range(4):
            cfg = tiny_config()
            params = ModelParams.initialize(cfg, seed=seed)
            x = Tensor(rng.standard_normal((4, 8, 3)).astype(np.float32))
            out = forward_block(x, params.blocks[0], cfg)
            assert out.shape == x.shape

    def test_matches_straight_line_oracle(self):
        cfg = ModelConfig(
            window_len=4, encoder_dim=8, bottleneck_dim=4, segment_size=4,
            num_blocks=2, lstm_hidden=2, num_heads=1, granularity_base=2,
            dropout=0.0,
        ).validate()
        params = ModelParams.initialize(cfg, seed=5, dtype=np.float64)
        bp = params.blocks[0]
        assert bp.factor == 2
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 4, 2))
        out = forward_block(Tensor(x), bp, cfg).data
        expected = block_oracle(x, bp, cfg.num_heads)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_divisibility_guard(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=0)
        bad = Tensor(np.zeros((4, 6, 3), dtype=np.float32))  # 6 % 4 != 0
        with pytest.raises((ConfigError, LayoutError)):
            forward_block(bad, params.blocks[0], cfg)


class TestForward:
    def test_zero_parameters_give_zero_outputs(self):
        cfg = tiny_config()
        params = ModelParams.zeros(cfg)
        est, _ = forward(np.random.default_rng(0).standard_normal(96).astype(np.float32),
                         params)
        np.testing.assert_array_equal(est.data, 0)

    @pytest.mark.parametrize("samples", [64, 97, 200])
    def test_output_count_and_length(self, samples):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=3)
        x = np.random.default_rng(1).standard_normal(samples).astype(np.float32)
        est, state = forward(x, params)
        assert est.shape == (cfg.num_sources, samples)
        assert state.masks.shape[0] == cfg.num_sources
        assert np.all(state.masks.data >= 0)

    def test_fixed_seed_forward_is_bit_reproducible(self):
        cfg = tiny_config()
        x = np.random.default_rng(2).standard_normal(128).astype(np.float32)
        runs = []
        for _ in range(2):
            params = ModelParams.initialize(cfg, seed=7)
            est, _ = forward(x, params)
            runs.append(est.data.copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_batched_forward_matches_single(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=4)
        rng = np.random.default_rng(3)
        batch = rng.standard_normal((80, 3)).astype(np.float32)
        est_b, _ = forward(batch, params)
        for b in range(3):
            est_s, _ = forward(batch[:, b].copy(), params)
            np.testing.assert_allclose(est_b.data[:, :, b], est_s.data, atol=2e-5)


class TestMaskHead:
    def test_masks_non_negative_and_zero_case(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=6)
        layout = make_segment_layout(10, cfg.segment_size)
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal(
            (cfg.bottleneck_dim, cfg.segment_size, layout.num_segments)
        ).astype(np.float32))
        masks = mask_head(x, params, layout)
        assert np.all(masks.data >= 0)

        zero_params = ModelParams.zeros(cfg)
        zmask = mask_head(Tensor(np.zeros(x.shape, dtype=np.float32)), zero_params, layout)
        np.testing.assert_array_equal(zmask.data, 0)

    def test_unit_kernel_conv_equals_linear(self):
        # the projection in the mask head is a 1x1-kernel map: applying the
        # same weights with linear() on flattened positions must agree
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=8)
        layout = make_segment_layout(6, cfg.segment_size)
        rng = np.random.default_rng(4)
        x = rng.standard_normal(
            (cfg.bottleneck_dim, cfg.segment_size, layout.num_segments)
        ).astype(np.float32)
        from sandglasset.nn import prelu
        from sandglasset.tensor import reshape

        gated = prelu(Tensor(x), params.mask_slope)
        direct = linear(gated, params.mask_w, params.mask_b).data
        flat = linear(reshape(gated, (cfg.bottleneck_dim, -1)),
                      params.mask_w, params.mask_b).data
        np.testing.assert_array_equal(direct.reshape(flat.shape), flat)


class TestDecode:
    def test_all_ones_mask_with_inverse_decoder(self):
        # toy E == M case: encoder identity (ReLU passes non-negative input),
        # decoder the exact inverse, all-ones masks -> overlap-add identity
        cfg = ModelConfig(
            window_len=4, encoder_dim=4, bottleneck_dim=4, segment_size=8,
            num_blocks=2, lstm_hidden=2, num_heads=2, granularity_base=2,
            encoder_bias=False,
        ).validate()
        params = ModelParams.zeros(cfg, dtype=np.float64)
        params.encoder_w.data[...] = np.eye(4)
        params.decoder_w.data[...] = np.eye(4)
        x = np.abs(np.random.default_rng(5).standard_normal(40)) + 0.1
        encoded, _, layout = encode(x, params, cfg)
        ones = Tensor(np.ones((cfg.num_sources,) + encoded.shape))
        waves = decode(encoded, ones, params.decoder_w, layout)
        hop = cfg.window_len // 2
        for c in range(cfg.num_sources):
            np.testing.assert_allclose(waves.data[c, :hop], x[:hop], atol=1e-12)
            np.testing.assert_allclose(waves.data[c, hop:], 2 * x[hop:], atol=1e-12)

    def test_zero_masks_give_silence(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=9)
        x = np.random.default_rng(6).standard_normal(64).astype(np.float32)
        encoded, _, layout = encode(x, params, cfg)
        zeros = Tensor(np.zeros((cfg.num_sources,) + encoded.shape, dtype=np.float32))
        waves = decode(encoded, zeros, params.decoder_w, layout)
        np.testing.assert_array_equal(waves.data, 0)

    def test_linear_in_the_mask(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=10)
        x = np.random.default_rng(7).standard_normal(64).astype(np.float64)
        params_d = ModelParams.initialize(cfg, seed=10, dtype=np.float64)
        encoded, _, layout = encode(x, params_d, cfg)
        rng = np.random.default_rng(8)
        mask = np.abs(rng.standard_normal((cfg.num_sources,) + encoded.shape))
        one = decode(encoded, Tensor(mask), params_d.decoder_w, layout).data
        three = decode(encoded, Tensor(3.0 * mask), params_d.decoder_w, layout).data
        np.testing.assert_allclose(three, 3.0 * one, rtol=1e-12)


class TestCostAccounting:
    def test_published_budget_window(self):
        report = count_parameters(paper_config())
        assert 2.25e6 <= report.total_params <= 2.35e6

    def test_bilstm_closed_form_value(self):
        # 2 directions * 4 gates * ((D + H) * H + H) at D = H = 128
        entries = dict(count_parameters(paper_config()).param_entries)
        assert entries["block1.lstm"] == 263_168

    def test_closed_form_equals_enumeration_many_configs(self):
        rng = np.random.default_rng(9)
        checked = 0
        while checked < 50:
            heads = int(rng.choice([1, 2, 4]))
            dim = heads * 2 * int(rng.integers(1, 5))
            base = int(rng.choice([2, 3, 4]))
            blocks = int(rng.choice([2, 4]))
            top = base ** (blocks // 2)
            seg = top * 2 * int(rng.integers(1, 3))
            cfg = ModelConfig(
                window_len=2 * int(rng.integers(1, 4)),
                encoder_dim=int(rng.integers(2, 12)),
                bottleneck_dim=dim,
                segment_size=seg,
                num_blocks=blocks,
                lstm_hidden=int(rng.integers(1, 9)),
                num_heads=heads,
                num_sources=int(rng.choice([2, 3])),
                granularity_base=base,
                encoder_bias=bool(rng.integers(0, 2)),
                single_granularity=bool(rng.integers(0, 2)),
            )
            try:
                cfg.validate()
            except ConfigError:
                continue
            params = ModelParams.zeros(cfg)
            assert count_parameters(cfg).total_params == params.table.total_parameters()
            checked += 1

    def test_attention_projections_scale_quadratically(self):
        small = dict(count_parameters(paper_config()).param_entries)
        big = dict(count_parameters(paper_config(bottleneck_dim=256)).param_entries)
        ratio = big["block1.san"] / small["block1.san"]
        assert 3.5 < ratio < 4.1

    def test_flops_within_published_band(self):
        report = estimate_flops(paper_config(), seconds=1.0, sample_rate=8000)
        assert abs(report.total_flops_per_second - 28.8e9) <= 0.25 * 28.8e9

    def test_bilstm_per_frame_flops(self):
        # both directions: 2 * 8 * (D*H + H*H) MAC-FLOPs at D = H = 128
        assert 2 * 8 * (128 * 128 + 128 * 128) == 524_288

    def test_multi_granularity_attention_cheaper(self):
        mg = san_flops(estimate_flops(paper_config()))
        sg = san_flops(estimate_flops(paper_config(single_granularity=True)))
        assert mg < sg

    def test_totals_match_breakdowns(self):
        p = count_parameters(small_config())
        assert p.total_params == sum(v for _, v in p.param_entries)
        f = estimate_flops(small_config())
        assert abs(f.total_flops_per_second - sum(v for _, v in f.flop_entries)) < 1e-6


class TestAblations:
    def test_disabling_residuals_changes_output(self):
        x = np.random.default_rng(10).standard_normal(96).astype(np.float32)
        base = forward(x, ModelParams.initialize(tiny_config(), seed=11))[0].data
        no_res = forward(
            x, ModelParams.initialize(tiny_config(block_residuals=False), seed=11)
        )[0].data
        assert not np.allclose(base, no_res)

    def test_single_granularity_changes_output(self):
        x = np.random.default_rng(11).standard_normal(96).astype(np.float32)
        base = forward(x, ModelParams.initialize(tiny_config(), seed=12))[0].data
        sg = forward(
            x, ModelParams.initialize(tiny_config(single_granularity=True), seed=12)
        )[0].data
        assert not np.allclose(base, sg)

    def test_offset_pairing_changes_output(self):
        x = np.random.default_rng(12).standard_normal(96).astype(np.float32)
        cfg = small_config()
        base = forward(x, ModelParams.initialize(cfg, seed=13))[0].data
        off = forward(
            x, ModelParams.initialize(small_config(residual_pairing="offset"), seed=13)
        )[0].data
        assert not np.allclose(base, off)


class TestCheckpoints:
    def test_bit_exact_roundtrip(self, tmp_path):
        params = ModelParams.initialize(tiny_config(), seed=14)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.config == params.config
        for name, tensor in params.table.items():
            np.testing.assert_array_equal(loaded.table[name].data, tensor.data)
        second = tmp_path / "model2.ckpt"
        save_checkpoint(second, loaded)
        assert path.read_bytes() == second.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint\ndata\n")
        with pytest.raises(LayoutError):
            load_checkpoint(path)


class TestFullGradient:
    def test_forward_plus_loss_gradcheck(self):
        cfg = tiny_config()
        params = ModelParams.initialize(cfg, seed=0, dtype=np.float64)
        sample = make_mixture(make_speaker_pool(2)[:2], 160, 2.5, RngState(7))
        mix = sample.mixture.astype(np.float64)
        refs = sample.sources.astype(np.float64)

        def loss_fn(_table):
            loss, _ = batch_loss(params, mix, refs)
            return loss

        report = grad_check(loss_fn, params.table, h=1e-5, max_coords_per_param=24)
        assert report.max_rel_error <= 1e-4
