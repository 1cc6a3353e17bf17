"""Multi-granularity self-attentive speech separation, built on a small
numpy tensor library with reverse-mode differentiation.
"""

from .errors import (
    ConfigError,
    DomainError,
    LayoutError,
    NumericError,
    SandglassetError,
    ShapeError,
)
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
from .model import (
    CostReport,
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
    paper_config,
    save_checkpoint,
    small_config,
    tiny_config,
)
from .nn import (
    AttentionParams,
    BiLstmParams,
    LstmDirectionParams,
    bilstm_layer,
    conv1d,
    dropout,
    layer_norm,
    linear,
    multi_head_attention,
    positional_encoding,
)
from .optim import GradCheckReport, ParamTable, adam_step, grad_check
from .tensor import RngState, Tensor, no_grad, softmax
from .training import (
    MixtureSample,
    SyntheticSpeaker,
    TrainConfig,
    fit,
    make_corpus,
    make_mixture,
    make_speaker_pool,
    mean_si_snri,
    post_train_augment,
    si_snr,
    si_snr_improvement,
    synth_utterance,
    upit_loss,
)

__version__ = "0.1.0"
