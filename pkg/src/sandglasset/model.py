"""The Sandglasset separation network.

Encoder, bottleneck, a stack of blocks (local BiLSTM + granularity-scheduled
self-attention across segments), same-granularity inter-block residuals,
mask head and decoder, plus closed-form parameter and FLOP accounting and a
binary checkpoint format.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, LayoutError, ShapeError
from .framing import (
    FrameLayout,
    SegmentLayout,
    frame_signal,
    make_frame_layout,
    make_segment_layout,
    merge_segments,
    overlap_add_frames,
    segment_frames,
)
from .nn import AttentionParams, BiLstmParams, LstmDirectionParams
from .optim import ParamTable
from .tensor import (
    RngState,
    Tensor,
    add,
    add_const,
    derive_seed,
    matmul,
    moveaxis,
    mul,
    reshape,
    slice_axis,
    stack,
)

_INIT_TAG = 0x5EED


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the separation network.

    Defaults are the published full-size setting; ``small_config`` and
    ``tiny_config`` scale it down for desk training and gradient checking.
    """

    window_len: int = 4  # encoder frame length (samples)
    encoder_dim: int = 256  # channels produced by the encoder
    bottleneck_dim: int = 128  # channels processed by the blocks
    segment_size: int = 256  # frames per segment at full granularity
    num_blocks: int = 6
    lstm_hidden: int = 128
    num_heads: int = 8
    num_sources: int = 2
    dropout: float = 0.1
    granularity_base: int = 4
    residual_pairing: str = "mirror"  # "mirror" pairs equal-granularity blocks
    encoder_bias: bool = True
    single_granularity: bool = False  # ablation: keep every block at factor 1
    block_residuals: bool = True  # ablation: disable inter-block residuals

    def validate(self) -> "ModelConfig":
        if self.num_blocks < 2 or self.num_blocks % 2 != 0:
            raise ConfigError(f"num_blocks must be even and >= 2, got {self.num_blocks}")
        if self.window_len < 2 or self.window_len % 2 != 0:
            raise ConfigError(f"window_len must be even and >= 2, got {self.window_len}")
        if self.segment_size < 2 or self.segment_size % 2 != 0:
            raise ConfigError(f"segment_size must be even and >= 2, got {self.segment_size}")
        if self.bottleneck_dim % self.num_heads != 0:
            raise ConfigError(
                f"bottleneck_dim {self.bottleneck_dim} must divide by "
                f"num_heads {self.num_heads}"
            )
        if self.bottleneck_dim % 2 != 0:
            raise ConfigError(
                f"bottleneck_dim must be even for the positional encoding, "
                f"got {self.bottleneck_dim}"
            )
        if self.num_sources < 2:
            raise ConfigError(f"num_sources must be >= 2, got {self.num_sources}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.granularity_base < 1:
            raise ConfigError(f"granularity_base must be >= 1, got {self.granularity_base}")
        if self.residual_pairing not in ("mirror", "offset"):
            raise ConfigError(
                f"residual_pairing must be 'mirror' or 'offset', got {self.residual_pairing!r}"
            )
        factors = self.granularity_schedule()
        top = max(factors)
        if self.segment_size % top != 0:
            raise ConfigError(
                f"segment_size {self.segment_size} must divide by the largest "
                f"granularity factor {top}"
            )
        return self

    def granularity_schedule(self) -> list[int]:
        if self.single_granularity:
            return [1] * self.num_blocks
        return granularity_factors(self.num_blocks, self.granularity_base)


def paper_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides).validate()


def small_config(**overrides) -> ModelConfig:
    base = ModelConfig(
        window_len=4, encoder_dim=32, bottleneck_dim=16, segment_size=16,
        num_blocks=4, lstm_hidden=16, num_heads=4,
    )
    return dataclasses.replace(base, **overrides).validate()


def tiny_config(**overrides) -> ModelConfig:
    base = ModelConfig(
        window_len=4, encoder_dim=8, bottleneck_dim=4, segment_size=8,
        num_blocks=2, lstm_hidden=4, num_heads=2, dropout=0.0,
    )
    return dataclasses.replace(base, **overrides).validate()


def granularity_factors(num_blocks: int, base: int = 4) -> list[int]:
    """Resampling factor per block: base**b up to the middle, then mirrored.

    The first half coarsens the segment axis geometrically; the second half
    retraces the same factors in reverse, so block b and block N+1-b share a
    granularity (e.g. N=6 -> [4, 16, 64, 64, 16, 4]).
    """
    if num_blocks < 2 or num_blocks % 2 != 0:
        raise ConfigError(f"num_blocks must be even and >= 2, got {num_blocks}")
    half = num_blocks // 2
    first = [base ** b for b in range(1, half + 1)]
    return first + first[::-1]


def pair_block(b: int, num_blocks: int, mode: str) -> int:
    """1-based index of the earlier block whose output feeds block b's residual."""
    if mode == "mirror":
        return num_blocks + 1 - b
    if mode == "offset":
        return b - num_blocks // 2
    raise ConfigError(f"unknown residual pairing {mode!r}")


@dataclass
class BlockParams:
    factor: int
    lstm: BiLstmParams
    proj_w: Tensor
    proj_b: Tensor
    norm_lr_gain: Tensor
    norm_lr_offset: Tensor
    san_pre_gain: Tensor
    san_pre_offset: Tensor
    san: AttentionParams
    ds_kernel: Tensor
    us_kernel: Tensor


class ModelParams:
    """All learnable weights, registered in a ParamTable with stable paths."""

    def __init__(self, config: ModelConfig, table: ParamTable):
        self.config = config
        self.table = table
        self._bind_views()

    @property
    def dtype(self):
        return self.table.dtype

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        config.validate()
        table = ParamTable(dtype=dtype)
        rng = RngState(derive_seed(seed, _INIT_TAG))
        cls._register_all(config, table, rng)
        return cls(config, table)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "ModelParams":
        config.validate()
        table = ParamTable(dtype=dtype)
        cls._register_all(config, table, rng=None)
        return cls(config, table)

    @staticmethod
    def _register_all(config: ModelConfig, table: ParamTable, rng: RngState | None):
        def glorot(path, shape, fan_in, fan_out):
            if rng is None:
                table.register(path, np.zeros(shape))
                return
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            table.register(path, rng.uniform(-bound, bound, shape))

        def const(path, shape, value):
            table.register(path, np.full(shape, value, dtype=np.float64))

        m, e, d = config.window_len, config.encoder_dim, config.bottleneck_dim
        h, heads, c = config.lstm_hidden, config.num_heads, config.num_sources

        glorot("encoder.weight", (e, m), m, e)
        if config.encoder_bias:
            const("encoder.bias", (e,), 0.0)
        glorot("bottleneck.weight", (d, e), e, d)

        for b, factor in enumerate(config.granularity_schedule(), start=1):
            prefix = f"block{b}"
            for direction in ("fwd", "bwd"):
                glorot(f"{prefix}.lstm.{direction}.w_ih", (4 * h, d), d, 4 * h)
                glorot(f"{prefix}.lstm.{direction}.w_hh", (4 * h, h), h, 4 * h)
                bias = np.zeros(4 * h)
                bias[h:2 * h] = 1.0  # forget gate starts open
                table.register(f"{prefix}.lstm.{direction}.bias", bias)
            glorot(f"{prefix}.proj.weight", (d, 2 * h), 2 * h, d)
            const(f"{prefix}.proj.bias", (d,), 0.0)
            const(f"{prefix}.norm_lr.gain", (d,), 1.0)
            const(f"{prefix}.norm_lr.offset", (d,), 0.0)
            const(f"{prefix}.san.pre_norm.gain", (d,), 1.0)
            const(f"{prefix}.san.pre_norm.offset", (d,), 0.0)
            for name in ("q", "k", "v"):
                glorot(f"{prefix}.san.w_{name}", (d, d), d, d)
                const(f"{prefix}.san.b_{name}", (d,), 0.0)
            glorot(f"{prefix}.san.w_out", (d, d), d, d)
            const(f"{prefix}.san.post_norm.gain", (d,), 1.0)
            const(f"{prefix}.san.post_norm.offset", (d,), 0.0)
            glorot(f"{prefix}.resample.ds_kernel", (d, factor), factor, factor)
            glorot(f"{prefix}.resample.us_kernel", (d, factor), factor, factor)

        const("mask.prelu_slope", (1,), 0.25)
        glorot("mask.weight", (c * e, d), d, c * e)
        const("mask.bias", (c * e,), 0.0)
        glorot("decoder.weight", (m, e), e, m)

    def _bind_views(self):
        t = self.table
        cfg = self.config
        self.encoder_w = t["encoder.weight"]
        self.encoder_b = t["encoder.bias"] if "encoder.bias" in t else None
        self.bottleneck_w = t["bottleneck.weight"]
        self.blocks: list[BlockParams] = []
        for b, factor in enumerate(cfg.granularity_schedule(), start=1):
            p = f"block{b}"
            lstm = BiLstmParams(
                fwd=LstmDirectionParams(
                    t[f"{p}.lstm.fwd.w_ih"], t[f"{p}.lstm.fwd.w_hh"], t[f"{p}.lstm.fwd.bias"]
                ),
                bwd=LstmDirectionParams(
                    t[f"{p}.lstm.bwd.w_ih"], t[f"{p}.lstm.bwd.w_hh"], t[f"{p}.lstm.bwd.bias"]
                ),
            )
            san = AttentionParams(
                w_q=t[f"{p}.san.w_q"], b_q=t[f"{p}.san.b_q"],
                w_k=t[f"{p}.san.w_k"], b_k=t[f"{p}.san.b_k"],
                w_v=t[f"{p}.san.w_v"], b_v=t[f"{p}.san.b_v"],
                w_out=t[f"{p}.san.w_out"],
                ln_gain=t[f"{p}.san.post_norm.gain"],
                ln_offset=t[f"{p}.san.post_norm.offset"],
            )
            self.blocks.append(
                BlockParams(
                    factor=factor,
                    lstm=lstm,
                    proj_w=t[f"{p}.proj.weight"],
                    proj_b=t[f"{p}.proj.bias"],
                    norm_lr_gain=t[f"{p}.norm_lr.gain"],
                    norm_lr_offset=t[f"{p}.norm_lr.offset"],
                    san_pre_gain=t[f"{p}.san.pre_norm.gain"],
                    san_pre_offset=t[f"{p}.san.pre_norm.offset"],
                    san=san,
                    ds_kernel=t[f"{p}.resample.ds_kernel"],
                    us_kernel=t[f"{p}.resample.us_kernel"],
                )
            )
        self.mask_slope = t["mask.prelu_slope"]
        self.mask_w = t["mask.weight"]
        self.mask_b = t["mask.bias"]
        self.decoder_w = t["decoder.weight"]


# -- forward pieces -------------------------------------------------------------


def encode(x, params: ModelParams, config: ModelConfig):
    """Waveform [T, ...] -> (encoded [E, L, ...], bottleneck [D, L, ...], layout).

    The encoder is a ReLU-gated per-frame linear map; the bottleneck is a
    plain linear map to the block width.
    """
    x = _coerce_wave(x, params.dtype)
    if x.shape[0] < config.window_len:
        raise ShapeError(
            f"waveform of {x.shape[0]} samples is shorter than one window "
            f"({config.window_len})"
        )
    frames, layout = frame_signal(x, config.window_len)
    encoded = nn.relu(nn.linear(frames, params.encoder_w, params.encoder_b))
    bottleneck = nn.linear(encoded, params.bottleneck_w)
    return encoded, bottleneck, layout


def forward_block(
    x: Tensor,
    bp: BlockParams,
    config: ModelConfig,
    training: bool = False,
    rng: RngState | None = None,
) -> Tensor:
    """One block: local BiLSTM, then resampled self-attention across segments.

    Input and output are [D, K, S, ...]; the DS/US pair leaves the shape
    unchanged.
    """
    if x.shape[1] % bp.factor != 0:
        raise ConfigError(
            f"segment length {x.shape[1]} not divisible by granularity factor {bp.factor}"
        )
    h = nn.bilstm_layer(x, bp.lstm)
    y_lr = nn.linear(h, bp.proj_w, bp.proj_b)
    x_ga = add(nn.layer_norm(y_lr, bp.norm_lr_gain, bp.norm_lr_offset), x)

    down = nn.conv1d(x_ga, bp.ds_kernel, stride=bp.factor)
    seq = moveaxis(down, 2, 1)  # [D, S, K/f, ...]
    seq = nn.layer_norm(seq, bp.san_pre_gain, bp.san_pre_offset)
    pe = nn.positional_encoding(seq.shape[1], seq.shape[0], dtype=seq.dtype)
    pe_b = pe.data.reshape(pe.shape + (1,) * (seq.ndim - 2))
    seq = nn.multi_head_attention(
        add_const(seq, pe_b), bp.san, config.num_heads,
        dropout_rate=config.dropout, rng=rng, training=training,
    )
    up = moveaxis(seq, 1, 2)  # [D, K/f, S, ...]
    return nn.conv1d(up, bp.us_kernel, stride=bp.factor, transposed=True)


def mask_head(x: Tensor, params: ModelParams, layout: SegmentLayout) -> Tensor:
    """Block output [D, K, S, ...] -> non-negative masks [C, E, L, ...].

    PReLU gate, per-position linear map to C*E channels, overlap-add across
    segments, then ReLU.
    """
    cfg = params.config
    gated = nn.prelu(x, params.mask_slope)
    projected = nn.linear(gated, params.mask_w, params.mask_b)  # [C*E, K, S, ...]
    merged = merge_segments(projected, layout)  # [C*E, L, ...]
    masks = nn.relu(merged)
    return reshape(masks, (cfg.num_sources, cfg.encoder_dim) + masks.shape[1:])


def decode(encoded: Tensor, masks: Tensor, decoder_w: Tensor, layout: FrameLayout) -> Tensor:
    """Apply each mask to the encoded mixture and rebuild C waveforms.

    est_c = OverlapAdd(W_dec @ (encoded * mask_c)); returns [C, T, ...].
    """
    num_sources = masks.shape[0]
    if masks.shape[1:] != encoded.shape:
        raise ShapeError(
            f"masks {masks.shape} do not match encoded features {encoded.shape}"
        )
    waves = []
    for c in range(num_sources):
        mask_c = reshape(slice_axis(masks, 0, c, c + 1), encoded.shape)
        frames = matmul(decoder_w, mul(encoded, mask_c))
        waves.append(overlap_add_frames(frames, layout))
    return stack(waves, axis=0)


@dataclass
class ForwardState:
    """Intermediate tensors kept around for inspection and the mask path."""

    encoded: Tensor
    bottleneck: Tensor
    frame_layout: FrameLayout
    segment_layout: SegmentLayout
    block_outputs: list[Tensor]
    masks: Tensor


def forward(
    x,
    params: ModelParams,
    config: ModelConfig | None = None,
    training: bool = False,
    rng: RngState | None = None,
):
    """Full separation pass: waveform [T, ...] -> estimates [C, T, ...].

    Blocks in the second half receive the output of their equal-granularity
    partner as an additive residual ("mirror" pairing) unless disabled.
    """
    config = config or params.config
    encoded, bottleneck, flayout = encode(x, params, config)
    segments, slayout = segment_frames(bottleneck, config.segment_size)

    n = config.num_blocks
    raw = []
    cur = segments
    for b in range(1, n + 1):
        y = forward_block(cur, params.blocks[b - 1], config, training, rng)
        raw.append(y)
        cur = y
        if config.block_residuals and b > n // 2:
            partner = pair_block(b, n, config.residual_pairing)
            cur = add(y, raw[partner - 1])

    masks = mask_head(cur, params, slayout)
    estimates = decode(encoded, masks, params.decoder_w, flayout)
    state = ForwardState(encoded, bottleneck, flayout, slayout, raw, masks)
    return estimates, state


def _coerce_wave(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype == dtype:
            return x
        return Tensor(x.data.astype(dtype), requires_grad=x.requires_grad)
    return Tensor(np.asarray(x, dtype=dtype))


# -- cost accounting --------------------------------------------------------------

MAC_FLOPS = 2  # one multiply-accumulate
ELEMENTWISE_FLOPS = 1
TRANSCENDENTAL_FLOPS = 5  # exp / tanh / sigmoid / sqrt


@dataclass
class CostReport:
    """Analytic parameter or FLOP tally with a per-component breakdown."""

    total_params: int | None = None
    total_flops_per_second: float | None = None
    param_entries: list = field(default_factory=list)
    flop_entries: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def check_totals(self):
        if self.total_params is not None:
            assert self.total_params == sum(v for _, v in self.param_entries)
        if self.total_flops_per_second is not None:
            assert abs(self.total_flops_per_second - sum(v for _, v in self.flop_entries)) < 1e-6

    def render(self) -> str:
        lines = []
        if self.param_entries:
            lines.append(f"{'component':<28}{'parameters':>14}")
            for name, v in self.param_entries:
                lines.append(f"{name:<28}{v:>14,d}")
            lines.append(f"{'total':<28}{self.total_params:>14,d}")
        if self.flop_entries:
            if lines:
                lines.append("")
            lines.append(f"{'component':<28}{'flops':>18}")
            for name, v in self.flop_entries:
                lines.append(f"{name:<28}{v:>18,.0f}")
            lines.append(f"{'total':<28}{self.total_flops_per_second:>18,.0f}")
        for note in self.notes:
            lines.append(f"# {note}")
        return "\n".join(lines)

    def machine_lines(self) -> list[str]:
        out = []
        if self.total_params is not None:
            out.append(f"total_params={self.total_params}")
        if self.total_flops_per_second is not None:
            out.append(f"total_flops_per_second={self.total_flops_per_second:.0f}")
        return out


def count_parameters(config: ModelConfig) -> CostReport:
    """Closed-form parameter count; matches live enumeration exactly."""
    config.validate()
    m, e, d = config.window_len, config.encoder_dim, config.bottleneck_dim
    h, c = config.lstm_hidden, config.num_sources

    entries = []
    encoder = e * m + (e if config.encoder_bias else 0)
    entries.append(("encoder", encoder))
    entries.append(("bottleneck", d * e))
    for b, factor in enumerate(config.granularity_schedule(), start=1):
        entries.append((f"block{b}.lstm", 2 * (4 * h * d + 4 * h * h + 4 * h)))
        entries.append((f"block{b}.proj", d * 2 * h + d))
        entries.append((f"block{b}.norm_lr", 2 * d))
        entries.append((f"block{b}.san", 3 * (d * d + d) + d * d + 4 * d))
        entries.append((f"block{b}.resample", 2 * d * factor))
    entries.append(("mask_head", 1 + c * e * d + c * e))
    entries.append(("decoder", m * e))

    total = sum(v for _, v in entries)
    bias_delta = e
    if config.encoder_bias:
        note = f"encoder bias included; total without it would be {total - bias_delta:,d}"
    else:
        note = f"encoder bias excluded; total with it would be {total + bias_delta:,d}"
    report = CostReport(total_params=total, param_entries=entries, notes=[note])
    report.check_totals()
    return report


def _layer_norm_flops(dim: int, positions: float) -> float:
    # mean, center, square, variance, normalize, scale, shift per channel
    # plus one sqrt and one divide per position
    return positions * (8 * dim * ELEMENTWISE_FLOPS + TRANSCENDENTAL_FLOPS + 1)


def estimate_flops(
    config: ModelConfig, seconds: float = 1.0, sample_rate: int = 8000
) -> CostReport:
    """Analytic FLOP count for processing ``seconds`` of input at ``sample_rate``.

    Convention: 1 multiply-accumulate = 2 FLOPs, elementwise = 1,
    transcendental (exp/tanh/sigmoid/sqrt) = 5.  Inference mode: dropout
    costs nothing.
    """
    config.validate()
    m, e, d = config.window_len, config.encoder_dim, config.bottleneck_dim
    h, heads, c = config.lstm_hidden, config.num_heads, config.num_sources
    k = config.segment_size

    t_samples = int(round(seconds * sample_rate))
    l = make_frame_layout(t_samples, m).num_frames
    s = make_segment_layout(l, k).num_segments
    positions = k * s  # frame slots per block tensor

    entries = []
    entries.append(("encoder", MAC_FLOPS * l * e * m
                    + (l * e if config.encoder_bias else 0) + l * e))
    entries.append(("bottleneck", MAC_FLOPS * l * d * e))

    half = config.num_blocks // 2
    for b, factor in enumerate(config.granularity_schedule(), start=1):
        lstm = positions * 2 * (
            MAC_FLOPS * 4 * (d * h + h * h)
            + 4 * h  # bias adds
            + TRANSCENDENTAL_FLOPS * 5 * h  # 3 sigmoids + 2 tanh
            + 4 * h  # cell/hidden elementwise updates
        )
        entries.append((f"block{b}.lstm", float(lstm)))
        entries.append((f"block{b}.proj", float(MAC_FLOPS * positions * d * 2 * h + positions * d)))
        entries.append((f"block{b}.norm_lr",
                        _layer_norm_flops(d, positions) + positions * d))
        entries.append((f"block{b}.ds", float(MAC_FLOPS * d * positions)))

        maps = k // factor
        per_map = (
            _layer_norm_flops(d, s)
            + s * d  # positional encoding add
            + 3 * (MAC_FLOPS * s * d * d + s * d)  # Q, K, V projections
            + MAC_FLOPS * s * s * d  # attention logits
            + s * s * heads  # logit scaling
            + heads * s * s * (TRANSCENDENTAL_FLOPS + 2)  # softmax exp + norm
            + MAC_FLOPS * s * s * d  # weighted sum of values
            + MAC_FLOPS * s * d * d  # output projection
            + s * d  # residual
            + _layer_norm_flops(d, s)
        )
        entries.append((f"block{b}.san", float(maps * per_map)))
        entries.append((f"block{b}.us", float(MAC_FLOPS * d * positions)))
        if config.block_residuals and b > half:
            entries.append((f"block{b}.residual", float(positions * d)))

    mask = (
        2 * positions * d  # PReLU compare + scale
        + MAC_FLOPS * positions * d * (c * e)
        + positions * c * e  # bias
        + positions * c * e  # overlap-add scatter
        + c * e * l  # ReLU
    )
    entries.append(("mask_head", float(mask)))
    entries.append(("masking", float(c * e * l)))
    entries.append(("decoder", float(MAC_FLOPS * c * l * m * e)))
    entries.append(("overlap_add", float(c * m * l)))

    total = float(sum(v for _, v in entries))
    report = CostReport(
        total_flops_per_second=total / seconds,
        flop_entries=[(name, v / seconds) for name, v in entries],
        notes=[
            "convention: multiply-accumulate=2 FLOPs, elementwise=1, transcendental=5",
            f"input: {seconds:g} s at {sample_rate} Hz -> {l} frames, {s} segments",
        ],
    )
    report.check_totals()
    return report


def san_flops(report: CostReport) -> float:
    """Total self-attention cost inside a FLOP report."""
    return sum(v for name, v in report.flop_entries if name.endswith(".san"))


# -- checkpoints -------------------------------------------------------------------

_CKPT_MAGIC = "sandglasset-checkpoint v1"
_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def save_checkpoint(path, params: ModelParams) -> None:
    """Write a checkpoint: plain-text header + raw little-endian float32 data.

    The header carries the config, a format version and a manifest of
    (path, shape, byte offset) in enumeration order; round trips are
    bit-exact.
    """
    lines = [_CKPT_MAGIC]
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"config {f.name}={getattr(params.config, f.name)}")
    blobs = []
    offset = 0
    for name, tensor in params.table.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        shape = "x".join(str(dim) for dim in tensor.shape)
        lines.append(f"param {name} {shape} {offset}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def _parse_config_value(name: str, raw: str):
    kind = _CONFIG_FIELDS[name]
    if kind in ("bool", bool):
        return raw == "True"
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, sep, blob = raw.partition(b"\ndata\n")
    if not sep:
        raise LayoutError(f"{path}: missing data section")
    lines = header.decode("utf-8").splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise LayoutError(f"{path}: not a recognized checkpoint (bad magic)")

    config_kv = {}
    manifest = []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            key, _, value = rest.partition("=")
            if key not in _CONFIG_FIELDS:
                raise LayoutError(f"{path}: unknown config field {key!r}")
            config_kv[key] = _parse_config_value(key, value)
        elif kind == "param":
            name, shape_s, offset_s = rest.rsplit(" ", 2)
            shape = tuple(int(v) for v in shape_s.split("x"))
            manifest.append((name, shape, int(offset_s)))
        else:
            raise LayoutError(f"{path}: unrecognized header line {line!r}")

    config = ModelConfig(**config_kv).validate()
    params = ModelParams.zeros(config, dtype=np.float32)
    if [name for name, _, _ in manifest] != params.table.paths():
        raise LayoutError(f"{path}: parameter manifest does not match the config")
    for name, shape, offset in manifest:
        tensor = params.table[name]
        if tensor.shape != shape:
            raise LayoutError(
                f"{path}: {name} has shape {shape} in file, expected {tensor.shape}"
            )
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensor.data[...] = values.reshape(shape)
    return params
