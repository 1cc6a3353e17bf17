"""Command-line entry point.

Verbs: train, separate, report-params, report-flops, grad-check,
synth-data, eval.  Exit codes: 0 success, 1 check failure, 2 usage or
configuration error, 3 numeric failure.

Heavy imports happen inside the command functions so that --threads can pin
the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from .errors import (
    ConfigError,
    DomainError,
    LayoutError,
    NumericError,
    ShapeError,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _pin_threads(argv) -> None:
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="key=value configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP threads (default 1; determinism is "
                             "guaranteed single-threaded)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sandglasset",
        description="Multi-granularity self-attentive speech separation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="synthesize a corpus and train a model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="separate a mono WAV into source files")
    p.add_argument("checkpoint")
    p.add_argument("input_wav")
    _add_common(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("report-params", help="analytic parameter count")
    _add_common(p)
    p.set_defaults(func=lambda a: cmd_report(a, "params"))

    p = sub.add_parser("report-flops", help="analytic FLOP count for 1 s of input")
    _add_common(p)
    p.set_defaults(func=lambda a: cmd_report(a, "flops"))

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    _add_common(p)
    p.add_argument("--inject-grad-fault", action="store_true",
                   help=argparse.SUPPRESS)  # corrupts one backward rule (self-test)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write synthetic mixtures as WAV files")
    _add_common(p)
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("eval", help="mean SI-SNR improvement on a synthetic test set")
    p.add_argument("checkpoint")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def _resolve_config(args, default_model=None):
    from .config import default_run_config, load_run_config

    if args.config is None:
        cfg = default_run_config()
        if default_model is not None:
            cfg.model = default_model
    else:
        cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def _echo_config(cfg, sink=None):
    from .config import render_run_config

    text = render_run_config(cfg)
    print("# resolved configuration")
    print(text)
    if sink is not None:
        sink.write("# resolved configuration\n" + text + "\n")


def _default_out_dir(seed: int) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join("runs", f"{stamp}-seed{seed}")


def cmd_train(args) -> int:
    from . import training
    from .model import ModelParams, load_checkpoint

    cfg = _resolve_config(args)
    out_dir = args.out or cfg.out_dir or _default_out_dir(cfg.train.seed)
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output directory {out_dir} is not writable")

    tc = cfg.train
    speakers = training.make_speaker_pool(tc.num_speakers)
    snr = (tc.snr_low, tc.snr_high)
    make = lambda count, tag, same=False: training.make_corpus(
        speakers, count, tc.clip_samples, seed=_corpus_seed(tc.seed, tag),
        sample_rate=tc.sample_rate, num_sources=cfg.model.num_sources,
        snr_range=snr, same_speaker=same,
    )
    train_set = make(tc.train_size, 1)
    val_set = make(tc.val_size, 2)

    if tc.post_train:
        ckpt_in = cfg.checkpoint or os.path.join(out_dir, "best.ckpt")
        if not os.path.exists(ckpt_in):
            print(
                f"error: post_train=true requires an existing checkpoint at {ckpt_in}; "
                "run a normal training first or set 'checkpoint' in the config",
                file=sys.stderr,
            )
            return EXIT_USAGE
        params = load_checkpoint(ckpt_in)
        if params.config != cfg.model:
            print("warning: checkpoint config overrides the model config", file=sys.stderr)
        train_set = training.post_train_augment(
            train_set, speakers, tc.seed, num_sources=params.config.num_sources,
            snr_range=snr, sample_rate=tc.sample_rate,
        )
        val_set = training.post_train_augment(
            val_set, speakers, tc.seed + 1, num_sources=params.config.num_sources,
            snr_range=snr, sample_rate=tc.sample_rate,
        )
    else:
        params = ModelParams.initialize(cfg.model, seed=tc.seed)

    log_path = os.path.join(out_dir, "train_log.txt")
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        _echo_config(cfg, sink=fh)

    with open(log_path, "a", encoding="utf-8") as log_file:
        result = training.fit(
            params, train_set, val_set, tc,
            checkpoint_path=os.path.join(out_dir, "best.ckpt"),
            log_hook=lambda line: (log_file.write(line + "\n"), log_file.flush()),
        )

    with open(os.path.join(out_dir, "loss_log.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.loss_lines) + "\n")
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"best_epoch={result.best_epoch}\n")
        fh.write(f"best_val_loss={result.best_val_loss:.8e}\n")
        fh.write(f"epochs_run={result.epochs_run}\n")
        fh.write(f"seed={tc.seed}\n")
        fh.write(f"threads={args.threads}\n")
        fh.write("mode=single-threaded\n" if args.threads == 1 else "mode=multi-threaded\n")
    print(f"best epoch {result.best_epoch}, validation loss {result.best_val_loss:.4f}")
    print(f"checkpoint: {os.path.join(out_dir, 'best.ckpt')}")
    return EXIT_OK


def _corpus_seed(seed: int, tag: int) -> int:
    from .tensor import derive_seed

    return derive_seed(seed, 0xC0DE00 + tag)


def cmd_separate(args) -> int:
    import numpy as np

    from .model import forward, load_checkpoint
    from .tensor import no_grad
    from .wavio import read_wav, write_wav

    cfg = _resolve_config(args)
    params = load_checkpoint(args.checkpoint)
    wav = read_wav(args.input_wav)
    if wav.channels != 1:
        print(f"error: {args.input_wav} has {wav.channels} channels; expected mono",
              file=sys.stderr)
        return EXIT_USAGE
    if wav.sample_rate != cfg.train.sample_rate:
        print(
            f"warning: {args.input_wav} is {wav.sample_rate} Hz but the model was "
            f"configured for {cfg.train.sample_rate} Hz; proceeding anyway",
            file=sys.stderr,
        )
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    with no_grad():
        estimates, _ = forward(wav.samples.astype(np.float32), params)
    if not np.all(np.isfinite(estimates.data)):
        raise NumericError("separation produced non-finite samples")
    for c in range(estimates.shape[0]):
        path = os.path.join(out_dir, f"source_{c + 1}.wav")
        write_wav(path, estimates.data[c], wav.sample_rate)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args, which: str) -> int:
    import dataclasses

    from .model import count_parameters, estimate_flops, san_flops

    cfg = _resolve_config(args)
    _echo_config(cfg)
    if which == "params":
        report = count_parameters(cfg.model)
    else:
        report = estimate_flops(cfg.model, seconds=1.0, sample_rate=cfg.train.sample_rate)
    print(report.render())
    for line in report.machine_lines():
        print(line)
    if which == "flops":
        mg = san_flops(report)
        sg_config = dataclasses.replace(cfg.model, single_granularity=True)
        sg = san_flops(estimate_flops(sg_config, seconds=1.0,
                                      sample_rate=cfg.train.sample_rate))
        print(f"san_flops_multi_granularity={mg:.0f}")
        print(f"san_flops_single_granularity={sg:.0f}")
        rel = (1.0 - mg / sg) * 100.0 if sg else 0.0
        print(f"# multi-granularity attention is {rel:.1f}% cheaper than fixed-granularity")
    return EXIT_OK


GRADCHECK_PARAM_LIMIT = 50_000
GRADCHECK_TOLERANCE = 1e-4


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import nn, training
    from .model import ModelParams, count_parameters, tiny_config
    from .optim import grad_check
    from .tensor import RngState, derive_seed

    cfg = _resolve_config(args, default_model=tiny_config())
    _echo_config(cfg)
    total = count_parameters(cfg.model).total_params
    if total > GRADCHECK_PARAM_LIMIT:
        print(
            f"error: grad-check is limited to {GRADCHECK_PARAM_LIMIT} parameters, "
            f"this config has {total}",
            file=sys.stderr,
        )
        return EXIT_USAGE

    seed = cfg.train.seed
    params = ModelParams.initialize(cfg.model, seed=seed, dtype=np.float64)
    speakers = training.make_speaker_pool(max(cfg.model.num_sources, 2))

    # The loss is piecewise smooth (ReLU/PReLU kinks, assignment switches);
    # finite differences are only meaningful at a differentiable point, so
    # probe a few deterministic mixtures and accept the first clean one.
    # A genuinely wrong backward rule fails on every probe.
    report = None
    if args.inject_grad_fault:
        nn.set_grad_fault("lstm")
    try:
        for attempt in range(5):
            rng = RngState(derive_seed(seed, 0x6C00 + attempt))
            sample = training.make_mixture(
                speakers[: cfg.model.num_sources], 40 * cfg.model.window_len,
                2.5, rng, sample_rate=cfg.train.sample_rate,
            )
            mix = sample.mixture.astype(np.float64)
            refs = sample.sources.astype(np.float64)

            def loss_fn(_table):
                loss, _ = training.batch_loss(params, mix, refs, training=False)
                return loss

            candidate = grad_check(loss_fn, params.table, h=1e-5)
            if report is None or candidate.max_rel_error < report.max_rel_error:
                report = candidate
            if report.max_rel_error <= GRADCHECK_TOLERANCE:
                break
            print(f"# probe {attempt}: max_rel_error={candidate.max_rel_error:.3e} "
                  f"(retrying at a different evaluation point)")
    finally:
        nn.set_grad_fault(None)
    print(f"max_rel_error={report.max_rel_error:.6e}")
    print(f"worst_parameter={report.worst_path}")
    print(f"coords_checked={report.coords_checked}")
    if report.max_rel_error <= GRADCHECK_TOLERANCE:
        print(f"grad-check PASS (tolerance {GRADCHECK_TOLERANCE:g})")
        return EXIT_OK
    print(f"grad-check FAIL (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_CHECK_FAILED


def cmd_synth_data(args) -> int:
    from . import training
    from .wavio import write_wav

    cfg = _resolve_config(args)
    _echo_config(cfg)
    out_dir = args.out or "synth-data"
    os.makedirs(out_dir, exist_ok=True)
    tc = cfg.train
    speakers = training.make_speaker_pool(tc.num_speakers)
    corpus = training.make_corpus(
        speakers, args.count, tc.clip_samples, seed=_corpus_seed(tc.seed, 9),
        sample_rate=tc.sample_rate, num_sources=cfg.model.num_sources,
        snr_range=(tc.snr_low, tc.snr_high),
    )
    for i, sample in enumerate(corpus):
        sample_dir = os.path.join(out_dir, f"sample_{i:05d}")
        os.makedirs(sample_dir, exist_ok=True)
        scale = 1.0 / max(1.0, float(abs(sample.mixture).max()))
        write_wav(os.path.join(sample_dir, "mixture.wav"), sample.mixture * scale,
                  tc.sample_rate)
        for c in range(sample.sources.shape[0]):
            write_wav(os.path.join(sample_dir, f"source_{c + 1}.wav"),
                      sample.sources[c] * scale, tc.sample_rate)
        with open(os.path.join(sample_dir, "meta.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"speaker_ids={','.join(str(s) for s in sample.speaker_ids)}\n")
            fh.write(f"snr_db={sample.snr_db:.4f}\n")
    print(f"wrote {len(corpus)} samples under {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import training
    from .model import load_checkpoint

    cfg = _resolve_config(args)
    _echo_config(cfg)
    params = load_checkpoint(args.checkpoint)
    tc = cfg.train
    speakers = training.make_speaker_pool(tc.num_speakers)
    test_set = training.make_corpus(
        speakers, tc.test_size, tc.clip_samples, seed=_corpus_seed(tc.seed, 3),
        sample_rate=tc.sample_rate, num_sources=params.config.num_sources,
        snr_range=(tc.snr_low, tc.snr_high),
    )
    score = training.mean_si_snri(params, test_set, batch_size=tc.batch_size)
    print(f"test_size={len(test_set)}")
    print(f"mean_si_snri_db={score:.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _pin_threads(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LayoutError, ShapeError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
