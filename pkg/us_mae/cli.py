"""
us-mae command line.

    us-mae gen-data --count 48000 --seed 0 --out train.us1d
    us-mae pretrain --data train.us1d --val val.us1d --model M --out runs/m
    us-mae finetune --data labeled.us1d --val val.us1d --init runs/m/best.umae --k 5
    us-mae eval --data test.us1d --ckpt runs/ft/best.umae --k 5

Exit codes: 0 success, 2 usage, 3 I/O or malformed data, 4 numeric, 5 compatibility.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import (
    STREAM_RECONSTRUCT,
    default_log_level,
    default_workers,
    derive_rng,
    load_config_file,
    parse_bool,
)
from .diffcore import ParamSet
from .errors import CompatibilityError, DataIOError, UsageError, UsMaeError
from .formats import Us1dFile, load_checkpoint, read_us1d, save_checkpoint, write_us1d
from .labeling import label_records
from .metrics import (
    TOPK_CHOICES,
    aggregate_runs,
    evaluate,
    format_aggregate,
    format_report,
    write_aggregate_csv,
    write_confusion_csv,
    write_report_csv,
    write_rows_csv,
)
from .model import ENCODER_PREFIX, PRESETS, check_compatible, param_count, preset, pretrain_forward
from .patching import MASK_RATIOS, MaskBatch, from_patches, mask_grid, sample_mask
from .signal_synth import (
    ENVELOPES,
    PROFILES,
    SAMPLE_RATE,
    DatasetSpec,
    SignalRecord,
    dequantize_8bit,
    generate_dataset,
    quantize_8bit,
    shannon_entropy,
    summarize,
)
from .training import (
    CODE_UNITS,
    TrainConfig,
    config_from_checkpoint,
    finetune,
    infer_logits,
    params_from_checkpoint,
    pretrain,
    to_checkpoint,
    write_log_csv,
)

logger = logging.getLogger(__name__)

MHZ = 1e6


# ==================== Helpers ====================

def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _load_labeled(path: str, what: str) -> Us1dFile:
    dataset = read_us1d(path)
    if not dataset.records:
        raise UsageError(f"{what} file {path} holds no records")
    if not dataset.labeled:
        raise UsageError(f"{what} file {path} has no labels; run 'us-mae label' first")
    return dataset


def _model_config(args: argparse.Namespace):
    return preset(
        args.model,
        patch_size=args.patch_size,
        mask_ratio=getattr(args, "mask_ratio", None),
        dropout=args.dropout,
    )


def _train_config(
    args: argparse.Namespace, mode: str, seed: int, sample_rate: float = SAMPLE_RATE
) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=seed,
        mode=mode,
        base_lr=args.lr,
        warmup_fraction=args.warmup,
        k=getattr(args, "k", 5),
        limit=getattr(args, "limit", None),
        sample_rate=sample_rate,
    )


# ==================== Commands ====================

def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate a synthetic labeled dataset."""
    _require(args, "out")
    spec = DatasetSpec.from_profile(
        args.profile,
        count=args.count,
        seed=args.seed,
        freq_min=args.freq_min * MHZ if args.freq_min is not None else None,
        freq_max=args.freq_max * MHZ if args.freq_max is not None else None,
        amp_min=args.amp_min,
        amp_max=args.amp_max,
        burst_min=args.burst_min,
        burst_max=args.burst_max,
        snr_min=args.snr_min,
        snr_max=args.snr_max,
        envelope=args.envelope,
        noise=not args.no_noise,
        full_scale=args.full_scale,
    )
    workers = args.workers if args.workers is not None else default_workers()
    records = generate_dataset(spec, workers=workers)
    write_us1d(args.out, Us1dFile(records, spec.signal_length, int(spec.sample_rate)))

    summary = summarize(records, spec.num_classes)
    counts = summary.label_counts
    print(f"✅ Wrote {summary.count:,} records to {args.out}")
    print(f"📊 Entropy: {summary.entropy_bits:.3f} bits")
    print(
        f"📊 Label counts: min {counts.min()} (class {counts.argmin()}), "
        f"max {counts.max()} (class {counts.argmax()})"
    )
    return 0


def _read_array(path: str) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    try:
        if suffix == ".npy":
            return np.load(path, allow_pickle=False)
        if suffix == ".csv":
            return np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as e:
        raise DataIOError(f"Cannot read {path}: {e}") from e
    raise UsageError(f"Unsupported input type {suffix!r}; use .npy or .csv")


def cmd_import(args: argparse.Namespace) -> int:
    """Convert measured-style signals into an unlabeled US1D file."""
    _require(args, "input", "out")
    array = np.atleast_2d(_read_array(args.input))
    if array.ndim != 2 or array.shape[1] == 0 or array.shape[1] > 0xFFFF:
        raise UsageError(f"Expected a (count, length) signal matrix, got shape {array.shape}")
    if args.codes:
        if array.min() < 0 or array.max() > 255:
            raise UsageError("8-bit codes must lie in 0-255")
        codes = np.rint(array).astype(np.uint8)
    else:
        codes = quantize_8bit(array)
    records = [SignalRecord(samples=row) for row in codes]
    write_us1d(args.out, Us1dFile(records, codes.shape[1], int(args.sample_rate)))
    print(f"✅ Imported {len(records):,} signals of {codes.shape[1]} samples to {args.out}")
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    """Label received signals with the matched filter."""
    _require(args, "data", "template", "out")
    dataset = read_us1d(args.data)
    template = read_us1d(args.template)
    if not template.records:
        raise UsageError(f"Template file {args.template} holds no records")
    labeled = label_records(dataset.records, template.records[0].samples)
    write_us1d(args.out, Us1dFile(labeled, dataset.signal_length, dataset.sample_rate))
    print(f"✅ Labeled {len(labeled):,} records to {args.out}")
    return 0


def cmd_entropy(args: argparse.Namespace) -> int:
    """Shannon entropy of the pooled amplitude histogram."""
    _require(args, "data")
    dataset = read_us1d(args.data)
    print(f"📊 Entropy: {shannon_entropy(dataset.records):.3f} bits")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Masked-reconstruction pre-training."""
    _require(args, "data")
    config = _model_config(args)
    train_set = read_us1d(args.data)
    train_config = _train_config(args, "pretrain", args.seed, train_set.sample_rate)
    val_signals = read_us1d(args.val).signals() if args.val else None

    result = pretrain(train_set.signals(), val_signals, config, train_config)

    out = Path(args.out)
    last_epoch = train_config.epochs - 1
    metrics = {m: v for e, s, m, v in result.log if e == last_epoch and s == "train"}
    save_checkpoint(
        str(out / "final.umae"),
        to_checkpoint(result.params, config, train_config, last_epoch, metrics, result.state),
    )
    save_checkpoint(
        str(out / "best.umae"),
        to_checkpoint(result.best_params, config, train_config, result.best_epoch),
    )
    write_log_csv(str(out / "pretrain_log.csv"), result.log)

    split = "val" if args.val else "train"
    history = result.history(split, "loss")
    print(f"✅ Pre-trained {config.name} (P={config.patch_size}, mask {config.mask_ratio:.3f})")
    print(
        f"📊 {split} reconstruction MAE: {history[0] * CODE_UNITS:.3f} -> "
        f"{history[-1] * CODE_UNITS:.3f} codes (best epoch {result.best_epoch + 1})"
    )
    print(f"💾 Checkpoints and log in {out}")
    return 0


def _encoder_from(path: str, config) -> Optional[ParamSet]:
    if path == "random":
        return None
    checkpoint = load_checkpoint(path)
    params = params_from_checkpoint(checkpoint)
    check_compatible(params, config, decoder=False, classifier=False)
    # Decoder weights are not needed for fine-tuning
    return params.subset(ENCODER_PREFIX)


def cmd_finetune(args: argparse.Namespace) -> int:
    """Supervised fine-tuning from a checkpoint or from scratch."""
    _require(args, "data")
    if args.runs < 1:
        raise UsageError(f"--runs must be >= 1, got {args.runs}")
    config = _model_config(args)
    train_set = _load_labeled(args.data, "Training")
    val_set = _load_labeled(args.val, "Validation") if args.val else None
    if val_set is not None and val_set.sample_rate != train_set.sample_rate:
        raise UsageError(
            f"Validation data sampled at {val_set.sample_rate} Hz, "
            f"training data at {train_set.sample_rate} Hz"
        )
    encoder = _encoder_from(args.init, config)
    mode = "scratch" if encoder is None else "finetune"
    eval_set = val_set or train_set
    if val_set is None:
        print("⚠️  No --val given; reporting metrics on the training data")

    out = Path(args.out)
    reports = []
    for run in range(args.runs):
        seed = args.seed + run
        train_config = _train_config(args, mode, seed, train_set.sample_rate)
        result = finetune(
            train_set.signals(),
            train_set.labels(),
            val_set.signals() if val_set else None,
            val_set.labels() if val_set else None,
            config,
            train_config,
            encoder=encoder,
        )
        report = result.report or evaluate(
            infer_logits(result.params, config, eval_set.signals(), args.batch),
            eval_set.labels(),
            k=args.k,
            sample_rate=train_set.sample_rate,
        )
        reports.append(report)

        run_dir = out / f"run{run}" if args.runs > 1 else out
        final_metrics = report.as_dict()
        save_checkpoint(
            str(run_dir / "final.umae"),
            to_checkpoint(result.params, config, train_config, train_config.epochs - 1,
                          final_metrics, result.state, kind=mode),
        )
        best_metrics = result.best_report.as_dict() if result.best_report else final_metrics
        save_checkpoint(
            str(run_dir / "best.umae"),
            to_checkpoint(result.best_params, config, train_config, result.best_epoch,
                          best_metrics, kind=mode),
        )
        write_log_csv(str(run_dir / "finetune_log.csv"), result.log)
        write_report_csv(str(run_dir / "report.csv"), [report])
        write_confusion_csv(str(run_dir / "confusion.csv"), report.confusion)
        print(format_report(report, title=f"{mode} run {run} (seed {seed})"))

    if args.runs > 1:
        stats = aggregate_runs(reports)
        write_aggregate_csv(str(out / "aggregate.csv"), stats)
        print(format_aggregate(stats, args.k, title=f"{mode}: {args.runs} runs"))
    print(f"💾 Checkpoints and reports in {out}")
    return 0


def _load_model(path: str, decoder: bool, classifier: bool):
    checkpoint = load_checkpoint(path)
    config = config_from_checkpoint(checkpoint)
    params = params_from_checkpoint(checkpoint)
    check_compatible(params, config, decoder=decoder, classifier=classifier)
    return config, params


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a fine-tuned checkpoint."""
    _require(args, "data", "ckpt")
    dataset = _load_labeled(args.data, "Evaluation")
    try:
        config, params = _load_model(args.ckpt, decoder=False, classifier=True)
    except CompatibilityError as e:
        raise CompatibilityError(f"{e} (evaluate needs a fine-tuned checkpoint)") from e
    logits = infer_logits(params, config, dataset.signals(), args.batch)
    report = evaluate(logits, dataset.labels(), k=args.k, sample_rate=dataset.sample_rate)
    print(format_report(report, title=f"Evaluation of {Path(args.ckpt).name}"))
    if args.out:
        write_report_csv(args.out, [report])
    if args.confusion:
        write_confusion_csv(args.confusion, report.confusion)
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    """Write original, visibility and reconstruction per sample as CSV."""
    _require(args, "data", "ckpt", "out")
    config, params = _load_model(args.ckpt, decoder=True, classifier=False)
    if args.mask_ratio is not None:
        config = replace(config, mask_ratio=args.mask_ratio)
        config.validate()
    dataset = read_us1d(args.data)
    if dataset.signal_length != config.signal_length:
        raise UsageError(
            f"Signals have {dataset.signal_length} samples, checkpoint expects {config.signal_length}"
        )
    signals = dequantize_8bit(dataset.signals())

    rows = []
    for index, signal in enumerate(signals):
        plan = sample_mask(
            config.patch_count, config.mask_ratio, derive_rng(args.seed, STREAM_RECONSTRUCT, index)
        )
        batch = MaskBatch.from_plans([plan])
        _, grid = pretrain_forward(params, config, signal[None, :], batch, training=False)
        recon = from_patches(grid.data)[0]
        visible = np.zeros(config.patch_count, dtype=bool)
        visible[plan.visible] = True
        flags = np.repeat(visible, config.patch_size)
        for sample in range(config.signal_length):
            rows.append([index, sample, float(signal[sample]), int(flags[sample]), float(recon[sample])])
    write_rows_csv(args.out, ("record", "sample", "original", "visible", "reconstruction"), rows)
    print(f"✅ Wrote {len(rows):,} rows for {len(signals):,} records to {args.out}")
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    """Per-component parameter counts for a preset."""
    config = preset(args.model, patch_size=args.patch_size)
    counts = param_count(config)
    print(f"📊 {config.name}: d_model {config.d_model_enc}/{config.d_model_dec}, "
          f"heads {config.heads}, d_head {config.d_head}/{config.d_head_dec}, "
          f"layers {config.layers_enc}/{config.layers_dec}, P={config.patch_size}")
    print(f"   Encoder blocks: {counts.encoder_blocks:>12,}")
    print(f"   Decoder blocks: {counts.decoder_blocks:>12,}")
    print(f"   Embeddings:     {counts.embeddings:>12,}")
    print(f"   Heads:          {counts.heads:>12,}")
    print(f"   Total:          {counts.total:>12,}")
    return 0


def cmd_masks(args: argparse.Namespace) -> int:
    """Masked/visible patch counts per patch size and ratio."""
    grid = mask_grid(args.signal_length)
    header = "P".rjust(5) + "".join(f"{r * 100:>10.1f}%" for r in MASK_RATIOS)
    print(f"📊 Masked/visible patches for L={args.signal_length}")
    print(header)
    for patch_size, cells in grid.items():
        print(f"{patch_size:>5}" + "".join(f"{f'{m}/{v}':>11}" for _, m, v in cells))
    return 0


# ==================== Parser ====================

# Keys a config file may not set
RESERVED_SETTINGS = frozenset({"help", "version", "config"})


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser that keeps a table of the settings it defines, for config files."""

    def __init__(self, *args, **kwargs):
        # dest -> True for flags that take no value
        self.settings: Dict[str, bool] = {}
        self.commands: Optional[argparse.Action] = None
        super().__init__(*args, **kwargs)

    def add_argument(self, *args, **kwargs) -> argparse.Action:
        action = super().add_argument(*args, **kwargs)
        self.settings[action.dest] = action.nargs == 0
        return action

    def add_subparsers(self, **kwargs):
        self.commands = super().add_subparsers(**kwargs)
        return self.commands

    def subcommands(self) -> List["CommandParser"]:
        return list(self.commands.choices.values()) if self.commands is not None else []


def _add_training_flags(sub: argparse.ArgumentParser, epochs: int) -> None:
    sub.add_argument("--model", default="M", choices=list(PRESETS), help="Model preset")
    sub.add_argument("--patch-size", type=int, default=None, help="Patch size (default 32)")
    sub.add_argument("--dropout", type=float, default=None, help="Dropout rate (default 0.1)")
    sub.add_argument("--epochs", type=int, default=epochs, help="Training epochs")
    sub.add_argument("--batch", type=int, default=1024, help="Batch size")
    sub.add_argument("--seed", type=int, default=0, help="Run seed")
    sub.add_argument("--lr", type=float, default=None, help="Base learning rate")
    sub.add_argument("--warmup", type=float, default=None, help="Warmup fraction of total steps")


def build_parser() -> CommandParser:
    parser = CommandParser(
        prog="us-mae",
        description="Masked-autoencoder pre-training for 1-D ultrasound time-of-flight estimation",
        epilog=__doc__.split("\n\n")[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key = value file supplying flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    sub = commands.add_parser("gen-data", help="Generate a synthetic dataset")
    sub.add_argument("--count", type=int, default=48000, help="Number of records")
    sub.add_argument("--seed", type=int, default=0, help="Dataset seed")
    sub.add_argument("--out", help="Output US1D file")
    sub.add_argument("--profile", default="synthetic", choices=sorted(PROFILES),
                     help="Parameter ranges to start from")
    sub.add_argument("--freq-min", type=float, help="Minimum frequency (MHz)")
    sub.add_argument("--freq-max", type=float, help="Maximum frequency (MHz)")
    sub.add_argument("--amp-min", type=float, help="Minimum normalized amplitude")
    sub.add_argument("--amp-max", type=float, help="Maximum normalized amplitude")
    sub.add_argument("--burst-min", type=int, help="Minimum burst length (samples)")
    sub.add_argument("--burst-max", type=int, help="Maximum burst length (samples)")
    sub.add_argument("--snr-min", type=float, help="Minimum peak SNR (dB)")
    sub.add_argument("--snr-max", type=float, help="Maximum peak SNR (dB)")
    sub.add_argument("--envelope", default="hann", choices=ENVELOPES, help="Burst envelope")
    sub.add_argument("--no-noise", action="store_true", help="Skip noise")
    sub.add_argument("--full-scale", type=float, help="Volts at the top 8-bit code (default 3.0)")
    sub.add_argument("--workers", type=int, default=None, help="Generation threads")
    sub.set_defaults(func=cmd_gen_data)

    sub = commands.add_parser("import", help="Convert .npy/.csv signals to unlabeled US1D")
    sub.add_argument("--input", help="Signal matrix, one signal per row")
    sub.add_argument("--out", help="Output US1D file")
    sub.add_argument("--codes", action="store_true", help="Input already holds 8-bit codes")
    sub.add_argument("--sample-rate", type=float, default=SAMPLE_RATE, help="Sampling rate (Hz)")
    sub.set_defaults(func=cmd_import)

    sub = commands.add_parser("label", help="Label signals with the matched filter")
    sub.add_argument("--data", help="Received signals (US1D)")
    sub.add_argument("--template", help="US1D file whose first record is the excitation")
    sub.add_argument("--out", help="Output labeled US1D file")
    sub.set_defaults(func=cmd_label)

    sub = commands.add_parser("entropy", help="Amplitude entropy of a dataset")
    sub.add_argument("--data", help="US1D file")
    sub.set_defaults(func=cmd_entropy)

    sub = commands.add_parser("pretrain", help="Masked-reconstruction pre-training")
    sub.add_argument("--data", help="Training US1D file")
    sub.add_argument("--val", help="Validation US1D file")
    sub.add_argument("--mask-ratio", type=float, default=None, help="Masking ratio (default 0.75)")
    sub.add_argument("--out", default="runs/pretrain", help="Output directory")
    _add_training_flags(sub, epochs=200)
    sub.set_defaults(func=cmd_pretrain)

    sub = commands.add_parser("finetune", help="Fine-tune for time-of-flight classification")
    sub.add_argument("--data", help="Labeled training US1D file")
    sub.add_argument("--val", help="Labeled validation US1D file")
    sub.add_argument("--init", default="random", help="Checkpoint path or 'random'")
    sub.add_argument("--k", type=int, default=5, choices=TOPK_CHOICES, help="Top-k metric")
    sub.add_argument("--runs", type=int, default=1, help="Independent runs (seed, seed+1, ...)")
    sub.add_argument("--limit", type=int, default=None, help="Use at most N labeled signals")
    sub.add_argument("--out", default="runs/finetune", help="Output directory")
    _add_training_flags(sub, epochs=200)
    sub.set_defaults(func=cmd_finetune)

    sub = commands.add_parser("eval", help="Evaluate a fine-tuned checkpoint")
    sub.add_argument("--data", help="Labeled US1D file")
    sub.add_argument("--ckpt", help="Checkpoint")
    sub.add_argument("--k", type=int, default=5, choices=TOPK_CHOICES, help="Top-k metric")
    sub.add_argument("--batch", type=int, default=256, help="Inference batch size")
    sub.add_argument("--out", help="Report CSV")
    sub.add_argument("--confusion", help="Confusion CSV")
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("reconstruct", help="Export masked reconstructions as CSV")
    sub.add_argument("--data", help="US1D file")
    sub.add_argument("--ckpt", help="Pre-training checkpoint")
    sub.add_argument("--mask-ratio", type=float, default=None, help="Override masking ratio")
    sub.add_argument("--seed", type=int, default=0, help="Mask seed")
    sub.add_argument("--out", help="Output CSV")
    sub.set_defaults(func=cmd_reconstruct)

    sub = commands.add_parser("params", help="Parameter counts for a preset")
    sub.add_argument("--model", default="M", choices=list(PRESETS), help="Model preset")
    sub.add_argument("--patch-size", type=int, default=None, help="Patch size")
    sub.set_defaults(func=cmd_params)

    sub = commands.add_parser("masks", help="Masked/visible counts per patch size and ratio")
    sub.add_argument("--signal-length", type=int, default=512, help="Signal length")
    sub.set_defaults(func=cmd_masks)

    return parser


def apply_config_file(parser: CommandParser, path: str) -> None:
    """Turn config file entries into subcommand defaults; explicit flags still win."""
    values = load_config_file(path)
    known = set()
    for sub in [parser, *parser.subcommands()]:
        defaults = {}
        for dest, takes_no_value in sub.settings.items():
            if dest not in values or dest in RESERVED_SETTINGS:
                continue
            raw = values[dest]
            # argparse converts string defaults; store_true flags need booleans
            defaults[dest] = parse_bool(raw) if takes_no_value else raw
            known.add(dest)
        sub.set_defaults(**defaults)
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"Unknown settings in {path}: {', '.join(unknown)}")


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, default_log_level(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv: Optional[List[str]] = None) -> int:
    """Parse `argv`, run the command, and map errors to exit codes."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            apply_config_file(parser, known.config)
        args = parser.parse_args(argv)
        setup_logging(args.verbose, args.quiet)
        return args.func(args) or 0
    except UsMaeError as e:
        print(f"❌ Error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    except KeyboardInterrupt:
        print("\n⚠️  Interrupted", file=sys.stderr)
        return 130


def main() -> None:
    """Console entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
