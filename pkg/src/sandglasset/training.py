"""Objective, metrics, synthetic corpus and the training loop.

The loss is negative scale-invariant source-to-noise ratio under
utterance-level permutation-invariant assignment.  Training data is fully
synthetic: harmonic voices with per-speaker pitch ranges stand in for real
recordings, which keeps every run deterministic and seconds-cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError
from .model import ModelConfig, ModelParams, forward, save_checkpoint
from .optim import ParamTable, adam_step
from .tensor import (
    RngState,
    Tensor,
    _accumulate,
    _result,
    as_tensor,
    derive_seed,
    mul_scalar,
    no_grad,
    reshape,
    slice_axis,
    stack,
    take_per_column,
    tmean,
)

SI_SNR_CEILING_DB = 60.0  # perfect reconstructions clamp here instead of +inf

_LN10 = float(np.log(10.0))


def si_snr(estimate, reference, ceiling_db: float = SI_SNR_CEILING_DB) -> Tensor:
    """Scale-invariant source-to-noise ratio in dB along axis 0.

    Both signals are mean-subtracted; the reference is scaled to the
    estimate's projection onto it and the ratio of projection to residual
    energy is returned, clamped at ``ceiling_db``.  Gradients flow into the
    estimate only.
    """
    est = as_tensor(estimate)
    ref = np.asarray(reference.data if isinstance(reference, Tensor) else reference,
                     dtype=est.data.dtype)
    if est.shape != ref.shape:
        raise ShapeError(f"si_snr: estimate {est.shape} vs reference {ref.shape}")
    if est.ndim < 1 or est.shape[0] < 2:
        raise ShapeError("si_snr: signals need at least two samples along axis 0")

    x = est.data - est.data.mean(axis=0)
    s = ref - ref.mean(axis=0)
    ref_energy = np.sum(s * s, axis=0)
    if np.any(ref_energy == 0):
        raise DomainError("si_snr: reference has zero variance")

    alpha = np.sum(x * s, axis=0) / ref_energy
    target = alpha * s
    target_energy = np.sum(target * target, axis=0)
    err = x - target
    err_energy = np.sum(err * err, axis=0)

    with np.errstate(divide="ignore", invalid="ignore"):
        db = (10.0 / _LN10) * (np.log(target_energy) - np.log(err_energy))
    db = np.where(err_energy == 0, ceiling_db, db)
    db = np.minimum(db, ceiling_db)
    out_data = np.asarray(db, dtype=est.data.dtype)

    # Gradient of the dB value w.r.t. the (un-centered) estimate; items at the
    # ceiling or outside the finite domain contribute zero.
    active = np.isfinite(out_data) & (out_data < ceiling_db)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            du = s / (alpha * ref_energy)  # d log(target_energy) term
            de = err / err_energy
        coef = (20.0 / _LN10) * np.where(active, g, 0.0)
        grad = coef * np.nan_to_num(du - de, nan=0.0, posinf=0.0, neginf=0.0)
        grad -= grad.mean(axis=0)
        _accumulate(est, grad.astype(est.data.dtype))

    return _result(out_data, (est,), backward)


def upit_loss(estimates, references):
    """Permutation-invariant negative mean SI-SNR.

    Scores every source assignment, picks the best per utterance, and
    returns (loss, chosen permutations); gradients flow only through the
    winning assignment.
    """
    est = as_tensor(estimates)
    ref = np.asarray(references.data if isinstance(references, Tensor) else references,
                     dtype=est.data.dtype)
    if est.shape != ref.shape:
        raise ShapeError(f"upit_loss: estimates {est.shape} vs references {ref.shape}")
    num_sources = est.shape[0]
    if num_sources < 2:
        raise ConfigError(f"upit_loss: need at least two sources, got {num_sources}")
    if num_sources > 4:
        raise ConfigError(
            f"upit_loss: exhaustive assignment search is limited to 4 sources, "
            f"got {num_sources}"
        )

    rest = est.shape[2:]  # () for a single utterance, (B,) for a batch
    pairwise = {}
    for i in range(num_sources):
        est_i = reshape(slice_axis(est, 0, i, i + 1), est.shape[1:])
        for j in range(num_sources):
            pairwise[(i, j)] = si_snr(est_i, ref[j])

    perms = list(permutations(range(num_sources)))
    scores = []
    for perm in perms:
        total = pairwise[(0, perm[0])]
        for i in range(1, num_sources):
            total = total + pairwise[(i, perm[i])]
        scores.append(mul_scalar(total, 1.0 / num_sources))

    stacked = stack(scores, axis=0)  # [P!, ...]
    if rest:
        flat = reshape(stacked, (len(perms), int(np.prod(rest))))
        best_idx = np.argmax(flat.data, axis=0)
        best = take_per_column(flat, best_idx)
        chosen = [perms[i] for i in best_idx]
    else:
        best_idx = int(np.argmax(stacked.data))
        best = reshape(slice_axis(stacked, 0, best_idx, best_idx + 1), ())
        chosen = perms[best_idx]
    loss = mul_scalar(tmean(best), -1.0)
    return loss, chosen


def si_snr_improvement(estimate, reference, mixture):
    """SI-SNR gain of the estimate over the raw mixture, in dB."""
    with no_grad():
        est_db = si_snr(as_tensor(estimate), reference).data
        mix_db = si_snr(as_tensor(mixture), reference).data
    gain = est_db - mix_db
    return float(gain) if np.ndim(gain) == 0 else gain


# -- synthetic voices ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpeaker:
    """Harmonic stand-in for a talker: pitch range, timbre, vibrato."""

    id: int
    f0_range: tuple  # (low_hz, high_hz)
    harmonic_profile: tuple  # amplitude per harmonic, fundamental first
    vibrato_rate: float  # Hz


@dataclass
class MixtureSample:
    mixture: np.ndarray  # [T]
    sources: np.ndarray  # [C, T]
    speaker_ids: tuple
    snr_db: float


def make_speaker_pool(
    num_speakers: int, f0_low: float = 85.0, f0_high: float = 340.0
) -> list[SyntheticSpeaker]:
    """Speakers with disjoint pitch bands and individually decaying timbres."""
    if num_speakers < 2:
        raise ConfigError(f"need at least two speakers, got {num_speakers}")
    band = (f0_high - f0_low) / num_speakers
    speakers = []
    for i in range(num_speakers):
        lo = f0_low + i * band
        hi = lo + 0.72 * band
        decay = 0.55 + 0.3 * (i % 4) / 3.0
        profile = tuple(decay ** h for h in range(10))
        vibrato = 4.0 + 3.0 * (i % 5) / 4.0
        speakers.append(SyntheticSpeaker(i, (lo, hi), profile, vibrato))
    return speakers


def synth_utterance(
    speaker: SyntheticSpeaker, num_samples: int, rng: RngState, sample_rate: int = 8000
) -> np.ndarray:
    """One voiced utterance: wandering pitch, vibrato, harmonics, envelope.

    Peak-normalized to 0.9.
    """
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    t = np.arange(num_samples) / sample_rate
    lo, hi = speaker.f0_range
    margin = 0.05 * (hi - lo)

    knots = rng.uniform(lo + margin, hi - margin, 4)
    knot_pos = np.linspace(0, num_samples - 1, 4)
    f0 = np.interp(np.arange(num_samples), knot_pos, knots)
    vibrato_phase = rng.uniform(0, 2 * np.pi)
    f0 = f0 * (1.0 + 0.015 * np.sin(2 * np.pi * speaker.vibrato_rate * t + vibrato_phase))

    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    nyquist_guard = 0.45 * sample_rate
    wave = np.zeros(num_samples)
    harmonic_phases = rng.uniform(0, 2 * np.pi, len(speaker.harmonic_profile))
    for h, amp in enumerate(speaker.harmonic_profile, start=1):
        if h * hi >= nyquist_guard:
            break
        wave += amp * np.sin(h * phase + harmonic_phases[h - 1])

    env_knots = rng.uniform(0.35, 1.0, 6)
    env_pos = np.linspace(0, num_samples - 1, 6)
    envelope = np.interp(np.arange(num_samples), env_pos, env_knots)
    wave = wave * envelope
    wave = wave - wave.mean()
    peak = np.max(np.abs(wave))
    return (0.9 / peak) * wave


def make_mixture(
    speakers: list[SyntheticSpeaker],
    num_samples: int,
    snr_db: float,
    rng: RngState,
    sample_rate: int = 8000,
) -> MixtureSample:
    """Mix one utterance per speaker; sources 2..C sit ``snr_db`` below source 1."""
    sources = [synth_utterance(sp, num_samples, rng, sample_rate) for sp in speakers]
    ref_energy = float(np.sum(sources[0] ** 2))
    for i in range(1, len(sources)):
        energy = float(np.sum(sources[i] ** 2))
        gain = np.sqrt(ref_energy / (energy * 10.0 ** (snr_db / 10.0)))
        sources[i] = sources[i] * gain
    stack_np = np.stack(sources, axis=0)
    mixture = stack_np.sum(axis=0)
    return MixtureSample(
        mixture=mixture,
        sources=stack_np,
        speaker_ids=tuple(sp.id for sp in speakers),
        snr_db=float(snr_db),
    )


def make_corpus(
    speakers: list[SyntheticSpeaker],
    count: int,
    num_samples: int,
    seed: int,
    sample_rate: int = 8000,
    num_sources: int = 2,
    snr_range: tuple = (0.0, 5.0),
    same_speaker: bool = False,
) -> list[MixtureSample]:
    """Deterministic corpus: sample i depends only on (seed, i)."""
    out = []
    for i in range(count):
        rng = RngState(derive_seed(seed, i))
        if same_speaker:
            chosen_idx = int(rng.integers(0, len(speakers)))
            chosen = [speakers[chosen_idx]] * num_sources
        else:
            picks = rng.permutation(len(speakers))[:num_sources]
            chosen = [speakers[int(p)] for p in picks]
        snr = float(rng.uniform(snr_range[0], snr_range[1]))
        out.append(make_mixture(chosen, num_samples, snr, rng, sample_rate))
    return out


def post_train_augment(
    dataset: list[MixtureSample],
    speakers: list[SyntheticSpeaker],
    seed: int,
    enabled: bool = True,
    num_sources: int = 2,
    snr_range: tuple = (0.0, 5.0),
    sample_rate: int = 8000,
) -> list[MixtureSample]:
    """Interleave the dataset 1:1 with freshly mixed same-speaker samples.

    Even positions keep the original stream, odd positions hold mixtures
    whose sources all come from one speaker; with ``enabled=False`` the
    original dataset is returned unchanged.
    """
    if not enabled:
        return list(dataset)
    num_samples = dataset[0].mixture.shape[0] if dataset else 0
    extra = make_corpus(
        speakers, len(dataset), num_samples, derive_seed(seed, 0xA0A0),
        sample_rate=sample_rate, num_sources=num_sources, snr_range=snr_range,
        same_speaker=True,
    )
    out = []
    for original, same in zip(dataset, extra):
        out.append(original)
        out.append(same)
    return out


# -- training loop -------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.98  # multiplicative, applied once per epoch
    patience: int = 10  # epochs without a better validation loss
    batch_size: int = 8
    max_epochs: int = 100
    seed: int = 0
    post_train: bool = False
    clip_norm: float | None = 5.0
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 200
    sample_rate: int = 8000
    clip_seconds: float = 1.0
    crop_seconds: float | None = None  # train on random crops of each clip
    num_speakers: int = 8
    snr_low: float = 0.0
    snr_high: float = 5.0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch_size and max_epochs must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or unset")
        if self.snr_low > self.snr_high:
            raise ConfigError("snr_low must not exceed snr_high")
        if self.crop_seconds is not None and not 0 < self.crop_seconds <= self.clip_seconds:
            raise ConfigError("crop_seconds must lie in (0, clip_seconds]")
        return self

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def crop_samples(self) -> int | None:
        if self.crop_seconds is None:
            return None
        return int(round(self.crop_seconds * self.sample_rate))


@dataclass
class FitResult:
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    loss_lines: list = field(default_factory=list)  # deterministic log
    timed_lines: list = field(default_factory=list)  # adds wall_ms
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def _assemble(dataset, idx_batch, crop=None, rng=None):
    """Stack a batch [T, B] / [C, T, B]; optionally take one random crop each."""
    mixes, refs = [], []
    for i in idx_batch:
        sample = dataset[i]
        mix, src = sample.mixture, sample.sources
        if crop is not None and crop < mix.shape[0]:
            start = int(rng.integers(0, mix.shape[0] - crop + 1)) if rng else 0
            mix = mix[start:start + crop]
            src = src[:, start:start + crop]
        mixes.append(mix)
        refs.append(src)
    return np.stack(mixes, axis=-1), np.stack(refs, axis=-1)


def batch_loss(params: ModelParams, mix: np.ndarray, refs: np.ndarray,
               training: bool = False, rng: RngState | None = None):
    est, _ = forward(mix, params, training=training, rng=rng)
    return upit_loss(est, refs)


def validation_loss(params: ModelParams, dataset, batch_size: int) -> float:
    losses = []
    with no_grad():
        for idx_batch in _batches(list(range(len(dataset))), batch_size):
            mix, refs = _assemble(dataset, idx_batch)
            loss, _ = batch_loss(params, mix, refs, training=False)
            losses.append(float(loss.data) * len(idx_batch))
    return float(sum(losses) / len(dataset))


def mean_si_snri(params: ModelParams, dataset, batch_size: int = 8) -> float:
    """Mean SI-SNR improvement over the mixture, best assignment per utterance."""
    total = 0.0
    count = 0
    with no_grad():
        for idx_batch in _batches(list(range(len(dataset))), batch_size):
            mix, refs = _assemble(dataset, idx_batch)
            est, _ = forward(mix, params)
            _, perms = upit_loss(est, refs)
            if isinstance(perms, tuple):
                perms = [perms]
            for b, perm in enumerate(perms):
                for i, j in enumerate(perm):
                    total += si_snr_improvement(
                        est.data[i, :, b], refs[j, :, b], mix[:, b]
                    )
                    count += 1
    return total / count


def fit(
    params: ModelParams,
    train_set: list[MixtureSample],
    val_set: list[MixtureSample],
    cfg: TrainConfig,
    checkpoint_path=None,
    log_hook=None,
    val_loss_override=None,
) -> FitResult:
    """Adam training with per-epoch learning-rate decay and early stopping.

    Stops once the validation loss has not improved for ``patience``
    consecutive epochs; the best checkpoint is written whenever validation
    improves.  ``val_loss_override`` substitutes the validation computation
    (testing hook for the early-stopping contract).
    """
    cfg.validate()
    dropout_rng = RngState(derive_seed(cfg.seed, 0xD0))
    shuffle_rng = RngState(derive_seed(cfg.seed, 0x5F))
    crop_rng = RngState(derive_seed(cfg.seed, 0xC2))
    lr = cfg.lr
    best_val = np.inf
    best_epoch = 0
    stale = 0
    result = FitResult(best_epoch=0, best_val_loss=np.inf, epochs_run=0)

    def emit(epoch, step, train_loss, val_loss, lr_now, wall_ms):
        val_txt = f"{val_loss:.8e}" if val_loss is not None else "-"
        base = f"{epoch},{step},{train_loss:.8e},{val_txt},{lr_now:.8e}"
        result.loss_lines.append(base)
        result.timed_lines.append(f"{base},{wall_ms:.1f}")
        if log_hook is not None:
            log_hook(result.timed_lines[-1])

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        seen = 0
        for step, idx_batch in enumerate(_batches(list(order), cfg.batch_size), start=1):
            t0 = time.perf_counter()
            mix, refs = _assemble(train_set, idx_batch, cfg.crop_samples, crop_rng)
            params.table.zero_grads()
            loss, _ = batch_loss(params, mix, refs, training=True, rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch} step {step}; "
                    f"parameter norm {_param_norm(params.table):.3e}"
                )
            loss.backward()
            try:
                adam_step(params.table, lr=lr, clip_norm=cfg.clip_norm)
            except NumericError as exc:
                raise NumericError(
                    f"{exc} at epoch {epoch} step {step}; "
                    f"parameter norm {_param_norm(params.table):.3e}"
                ) from exc
            epoch_loss += value * len(idx_batch)
            seen += len(idx_batch)
            emit(epoch, step, value, None, lr, (time.perf_counter() - t0) * 1e3)

        train_loss = epoch_loss / max(seen, 1)
        t0 = time.perf_counter()
        if val_loss_override is not None:
            val = float(val_loss_override(epoch))
        else:
            val = validation_loss(params, val_set, cfg.batch_size)
        emit(epoch, 0, train_loss, val, lr, (time.perf_counter() - t0) * 1e3)
        result.history.append((epoch, train_loss, val, lr))
        result.epochs_run = epoch

        if val < best_val:
            best_val = val
            best_epoch = epoch
            stale = 0
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params)
        else:
            stale += 1

        lr = lr * cfg.lr_decay  # exactly once per epoch boundary
        if stale >= cfg.patience:
            break

    result.best_epoch = best_epoch
    result.best_val_loss = float(best_val)
    return result


def _param_norm(table: ParamTable) -> float:
    return float(np.sqrt(sum(float(np.sum(t.data.astype(np.float64) ** 2))
                             for _, t in table.items())))
