"""Frame/segment bookkeeping: frozen examples, round-trip identities, coverage
counting oracles, linearity, and gradient flow through the index ops."""

import numpy as np
import pytest

from helpers import op_grad_check, weighted_sum
from sandglasset.errors import ConfigError, LayoutError
from sandglasset.framing import (
    frame_signal,
    make_frame_layout,
    make_segment_layout,
    merge_segments,
    overlap_add_frames,
    segment_frames,
)
from sandglasset.tensor import Tensor


class TestFrameSignal:
    def test_eight_samples_window_four(self):
        frames, layout = frame_signal(np.arange(1.0, 9.0), 4)
        assert layout.num_frames == 4
        expected = np.array([
            [1, 3, 5, 7],
            [2, 4, 6, 8],
            [3, 5, 7, 0],
            [4, 6, 8, 0],
        ], dtype=float)
        np.testing.assert_array_equal(frames.data, expected)

    def test_zeros_stay_zero(self):
        frames, layout = frame_signal(np.zeros(4), 4)
        assert layout.num_frames == 2
        np.testing.assert_array_equal(frames.data, np.zeros((4, 2)))

    def test_five_ones_pads_last_frame(self):
        frames, layout = frame_signal(np.ones(5), 4)
        assert layout.num_frames == 3
        np.testing.assert_array_equal(frames.data[:, 2], [1, 0, 0, 0])

    def test_odd_window_rejected(self):
        with pytest.raises(ConfigError):
            frame_signal(np.ones(8), 5)
        with pytest.raises(ConfigError):
            frame_signal(np.ones(8), 0)

    @pytest.mark.parametrize("samples,window", [(8, 4), (7, 4), (100, 8), (5, 2), (33, 16)])
    def test_frame_count_formula(self, samples, window):
        layout = make_frame_layout(samples, window)
        assert layout.num_frames == int(np.ceil(2 * samples / window))


class TestOverlapAddFrames:
    def test_known_overlap_arithmetic(self):
        frames, layout = frame_signal(np.arange(1.0, 9.0), 4)
        out = overlap_add_frames(frames, layout)
        np.testing.assert_array_equal(out.data, [1, 2, 6, 8, 10, 12, 14, 16])

    def test_single_frame_is_identity(self):
        frames, layout = frame_signal(np.array([1.0, 2.0]), 4)
        assert layout.num_frames == 1
        out = overlap_add_frames(frames, layout)
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_roundtrip_doubles_interior(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(41)
        frames, layout = frame_signal(x, 8)
        out = overlap_add_frames(frames, layout).data
        np.testing.assert_array_equal(out[:4], x[:4])
        np.testing.assert_array_equal(out[4:], 2 * x[4:])

    def test_layout_mismatch_raises(self):
        frames, layout = frame_signal(np.ones(8), 4)
        bad = make_frame_layout(8, 6)
        with pytest.raises(LayoutError):
            overlap_add_frames(frames, bad)


class TestSegmentFrames:
    def test_six_frames_segment_four(self):
        x = np.arange(1.0, 7.0)[None, :]  # a1..a6 in one channel
        segments, layout = segment_frames(x, 4)
        assert layout.num_segments == 4
        expected = np.array([
            [0, 0, 1, 2],
            [1, 2, 3, 4],
            [3, 4, 5, 6],
            [5, 6, 0, 0],
        ], dtype=float).T  # [K, S]
        np.testing.assert_array_equal(segments.data[0], expected)

    def test_every_frame_covered_exactly_twice(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 37))
        segments, layout = segment_frames(x, 16)
        # index-counting oracle over the gather pattern
        counts = np.zeros(37, dtype=int)
        for s in range(layout.num_segments):
            for k in range(layout.segment_len):
                idx = s * layout.hop + k - layout.front_pad
                if 0 <= idx < 37:
                    counts[idx] += 1
        assert np.all(counts == 2)

    def test_layout_formulas(self):
        for frames, seg in [(6, 4), (2, 2), (37, 16), (100, 8), (5, 4), (1, 4)]:
            layout = make_segment_layout(frames, seg)
            hop = seg // 2
            assert layout.front_pad == hop
            assert (layout.padded_len - seg) % hop == 0
            assert layout.num_segments == (layout.padded_len - seg) // hop + 1
            rem = frames % hop
            assert layout.num_segments == frames // hop + (1 if rem == 0 else 2)

    def test_segment_length_validation(self):
        with pytest.raises(ConfigError):
            make_segment_layout(5, 3)
        with pytest.raises(ConfigError):
            make_segment_layout(5, 0)


class TestMergeSegments:
    def test_merge_of_segment_is_double_identity(self):
        rng = np.random.default_rng(2)
        x = rng.integers(-5, 6, size=(4, 23)).astype(np.float64)
        segments, layout = segment_frames(x, 8)
        merged = merge_segments(segments, layout)
        np.testing.assert_array_equal(merged.data, 2 * x)  # integer-exact

    def test_zero_tensor_merges_to_zero(self):
        layout = make_segment_layout(10, 4)
        z = np.zeros((2, 4, layout.num_segments))
        np.testing.assert_array_equal(merge_segments(z, layout).data, np.zeros((2, 10)))

    def test_matches_scatter_add_oracle(self):
        rng = np.random.default_rng(3)
        layout = make_segment_layout(11, 6)
        y = rng.standard_normal((2, 6, layout.num_segments))
        expected = np.zeros((2, layout.padded_len))
        for s in range(layout.num_segments):
            for k in range(6):
                expected[:, s * layout.hop + k] += y[:, k, s]
        expected = expected[:, layout.front_pad:layout.front_pad + 11]
        np.testing.assert_array_equal(merge_segments(y, layout).data, expected)

    def test_layout_mismatch_raises(self):
        layout = make_segment_layout(10, 4)
        with pytest.raises(LayoutError):
            merge_segments(np.zeros((2, 4, layout.num_segments + 1)), layout)


class TestRoundTripProperties:
    def test_twenty_random_combinations_exact(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            frames_n = int(rng.integers(1, 200))
            seg = 2 * int(rng.integers(1, 17))
            depth = int(rng.integers(1, 5))
            x = rng.integers(-9, 10, size=(depth, frames_n)).astype(np.float64)
            segments, layout = segment_frames(x, seg)
            np.testing.assert_array_equal(merge_segments(segments, layout).data, 2 * x)

            samples = int(rng.integers(1, 300))
            window = 2 * int(rng.integers(1, 13))
            wave = rng.integers(-9, 10, size=samples).astype(np.float64)
            fr, flayout = frame_signal(wave, window)
            out = overlap_add_frames(fr, flayout).data
            np.testing.assert_array_equal(out[:window // 2], wave[:window // 2])
            np.testing.assert_array_equal(out[window // 2:], 2 * wave[window // 2:])

    def test_overlap_add_is_linear(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 20))
        y = rng.standard_normal((3, 20))
        a, b = 2.0, -0.5
        sx, layout = segment_frames(x, 6)
        sy, _ = segment_frames(y, 6)
        lhs = merge_segments(a * Tensor(sx.data) + b * Tensor(sy.data), layout).data
        rhs = a * merge_segments(sx, layout).data + b * merge_segments(sy, layout).data
        np.testing.assert_array_equal(lhs, rhs)

    def test_batched_trailing_axis_matches_single(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 15, 3))
        segments, layout = segment_frames(x, 4)
        for b in range(3):
            single, _ = segment_frames(x[:, :, b].copy(), 4)
            np.testing.assert_array_equal(segments.data[:, :, :, b], single.data)


class TestFramingGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_frame_and_overlap_add_gradients(self, seed):
        rng = np.random.default_rng(seed)
        layout = make_frame_layout(19, 4)
        w_frames = rng.standard_normal((4, layout.num_frames))
        w_wave = rng.standard_normal(19)

        def build_frames(table):
            frames, _ = frame_signal(table["x"], 4)
            return weighted_sum(frames, w_frames)

        report = op_grad_check(build_frames, {"x": rng.standard_normal(19)})
        assert report.max_rel_error <= 1e-6

        def build_ola(table):
            out = overlap_add_frames(table["f"], layout)
            return weighted_sum(out, w_wave)

        report = op_grad_check(
            build_ola, {"f": rng.standard_normal((4, layout.num_frames))}
        )
        assert report.max_rel_error <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_segment_and_merge_gradients(self, seed):
        rng = np.random.default_rng(seed + 10)
        layout = make_segment_layout(13, 4)
        w_seg = rng.standard_normal((2, 4, layout.num_segments))
        w_frames = rng.standard_normal((2, 13))

        def build_segments(table):
            segments, _ = segment_frames(table["x"], 4)
            return weighted_sum(segments, w_seg)

        report = op_grad_check(build_segments, {"x": rng.standard_normal((2, 13))})
        assert report.max_rel_error <= 1e-6

        def build_merge(table):
            return weighted_sum(merge_segments(table["y"], layout), w_frames)

        report = op_grad_check(
            build_merge, {"y": rng.standard_normal((2, 4, layout.num_segments))}
        )
        assert report.max_rel_error <= 1e-6
