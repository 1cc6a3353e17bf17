"""Index bookkeeping between waveforms, 50%-overlap frames and 50%-overlap
segments, with overlap-add inverses.

Padding is chosen so that every sample with index >= hop lies in exactly
two frames and every frame lies in exactly two segments; overlap-add then
reconstructs exactly twice the input (raw sums, no averaging), which the
rest of the package relies on.  All four mapping operations are
differentiable: the adjoint of a zero-padded gather is the matching
scatter-add and vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayoutError
from .tensor import Tensor, _accumulate, _result, as_tensor


@dataclass(frozen=True)
class FrameLayout:
    """Geometry linking a length-T waveform to L frames of length M, hop M/2."""

    num_samples: int  # T
    window_len: int  # M
    hop: int  # M // 2
    num_frames: int  # L
    tail_pad: int  # zeros appended past the last sample


def make_frame_layout(num_samples: int, window_len: int) -> FrameLayout:
    if window_len <= 0 or window_len % 2 != 0:
        raise ConfigError(f"window length must be a positive even number, got {window_len}")
    if num_samples < 1:
        raise ConfigError(f"waveform must contain at least one sample, got {num_samples}")
    hop = window_len // 2
    num_frames = -(-2 * num_samples // window_len)  # ceil(2T / M)
    tail_pad = (num_frames - 1) * hop + window_len - num_samples
    return FrameLayout(num_samples, window_len, hop, num_frames, tail_pad)


@dataclass(frozen=True)
class SegmentLayout:
    """Geometry linking L frames to S segments of length K, hop P = K/2.

    front_pad is always P; end_pad is the smallest value that keeps the
    padded length a multiple of P while every original frame falls in
    exactly two segments.
    """

    num_frames: int  # L
    segment_len: int  # K
    hop: int  # P = K // 2
    front_pad: int
    end_pad: int
    num_segments: int  # S

    @property
    def padded_len(self) -> int:
        return self.front_pad + self.num_frames + self.end_pad


def make_segment_layout(num_frames: int, segment_len: int) -> SegmentLayout:
    if segment_len < 2 or segment_len % 2 != 0:
        raise ConfigError(f"segment length must be an even number >= 2, got {segment_len}")
    if num_frames < 1:
        raise ConfigError(f"need at least one frame, got {num_frames}")
    hop = segment_len // 2
    rem = num_frames % hop
    end_pad = hop if rem == 0 else 2 * hop - rem
    num_segments = num_frames // hop + (1 if rem == 0 else 2)
    layout = SegmentLayout(num_frames, segment_len, hop, hop, end_pad, num_segments)
    assert (layout.padded_len - segment_len) % hop == 0
    assert num_segments == (layout.padded_len - segment_len) // hop + 1
    return layout


def _group_first(arr: np.ndarray, n_index_axes: int) -> np.ndarray:
    """Move axis 0 behind the first ``n_index_axes`` axes (for ufunc.at)."""
    return np.moveaxis(arr, 0, n_index_axes)


def _gather(x: Tensor, idx: np.ndarray, pad_before: int, pad_after: int, axis: int) -> Tensor:
    """Zero-pad ``axis`` of x, then index it with ``idx`` (any shape).

    The indexed axis is replaced by idx's axes.  Backward scatter-adds the
    gradient through the same indices and drops what lands on padding.
    """
    xd = x.data
    pad_width = [(0, 0)] * xd.ndim
    pad_width[axis] = (pad_before, pad_after)
    padded = np.pad(xd, pad_width) if pad_before or pad_after else xd
    out = padded[idx] if axis == 0 else padded[:, idx]
    keep = slice(pad_before, pad_before + xd.shape[axis])

    def backward(g):
        buf = np.zeros_like(padded)
        if axis == 0:
            np.add.at(buf, idx, g)
            _accumulate(x, buf[keep])
        else:
            np.add.at(np.moveaxis(buf, 1, 0), idx, _group_first(g, idx.ndim))
            _accumulate(x, buf[:, keep])

    return _result(np.ascontiguousarray(out), (x,), backward)


def _scatter(
    x: Tensor, idx: np.ndarray, pad_before: int, pad_after: int, out_len: int, axis: int
) -> Tensor:
    """Scatter-add x through ``idx`` into a padded axis, then strip padding.

    Inverse-adjoint of ``_gather`` with the same geometry.
    """
    xd = x.data
    padded_len = pad_before + out_len + pad_after
    keep = slice(pad_before, pad_before + out_len)
    if axis == 0:
        buf = np.zeros((padded_len,) + xd.shape[idx.ndim:], dtype=xd.dtype)
        np.add.at(buf, idx, xd)
        out = buf[keep]
    else:
        buf = np.zeros((xd.shape[0], padded_len) + xd.shape[1 + idx.ndim:], dtype=xd.dtype)
        np.add.at(np.moveaxis(buf, 1, 0), idx, _group_first(xd, idx.ndim))
        out = buf[:, keep]

    def backward(g):
        if axis == 0:
            gpad = np.zeros((padded_len,) + g.shape[1:], dtype=g.dtype)
            gpad[keep] = g
            _accumulate(x, gpad[idx])
        else:
            gpad = np.zeros((g.shape[0], padded_len) + g.shape[2:], dtype=g.dtype)
            gpad[:, keep] = g
            _accumulate(x, gpad[:, idx])

    return _result(np.ascontiguousarray(out), (x,), backward)


def _frame_indices(layout: FrameLayout) -> np.ndarray:
    m, l = layout.window_len, layout.num_frames
    return (np.arange(m)[:, None] + layout.hop * np.arange(l)[None, :]).astype(np.intp)


def _segment_indices(layout: SegmentLayout) -> np.ndarray:
    k, s = layout.segment_len, layout.num_segments
    return (np.arange(k)[:, None] + layout.hop * np.arange(s)[None, :]).astype(np.intp)


def frame_signal(x, window_len: int):
    """Split a waveform [T, ...] into 50%-overlapping frames [M, L, ...].

    Frame l holds samples [l*M/2, l*M/2 + M), zero-padded past the end;
    L = ceil(2T / M).
    """
    x = as_tensor(x)
    layout = make_frame_layout(x.shape[0], window_len)
    return _gather(x, _frame_indices(layout), 0, layout.tail_pad, axis=0), layout


def overlap_add_frames(frames, layout: FrameLayout) -> Tensor:
    """Sum 50%-overlapping frames [M, L, ...] back to a waveform [T, ...].

    Raw sums: samples covered twice come out doubled.
    """
    frames = as_tensor(frames)
    if frames.shape[:2] != (layout.window_len, layout.num_frames):
        raise LayoutError(
            f"frames shaped {frames.shape} do not match layout "
            f"(M={layout.window_len}, L={layout.num_frames})"
        )
    return _scatter(
        frames, _frame_indices(layout), 0, layout.tail_pad, layout.num_samples, axis=0
    )


def segment_frames(x, segment_len: int):
    """Split frame features [D, L, ...] into segments [D, K, S, ...].

    Front-pads K/2 zero frames and minimally end-pads so every original
    frame lands in exactly two segments.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise LayoutError(f"segment_frames expects [D, L, ...], got {x.shape}")
    layout = make_segment_layout(x.shape[1], segment_len)
    out = _gather(
        x, _segment_indices(layout), layout.front_pad, layout.end_pad, axis=1
    )
    return out, layout


def merge_segments(segments, layout: SegmentLayout) -> Tensor:
    """Overlap-add segments [D, K, S, ...] back to frames [D, L, ...].

    Raw sums across the two covering segments, then the front/end padding
    is stripped; with segment_frames this composes to exactly 2x identity.
    """
    segments = as_tensor(segments)
    if segments.ndim < 3 or segments.shape[1:3] != (layout.segment_len, layout.num_segments):
        raise LayoutError(
            f"segments shaped {segments.shape} do not match layout "
            f"(K={layout.segment_len}, S={layout.num_segments})"
        )
    return _scatter(
        segments,
        _segment_indices(layout),
        layout.front_pad,
        layout.end_pad,
        layout.num_frames,
        axis=1,
    )
