# coding: utf-8
"""
The `nael` command: dataset generation, staged training, evaluation, inference and gradient-map dumps.

Every error raised on purpose by the package ends the command with its `exit_code`: 2 for bad parameters, 3 for bad data, 4 for a missing prerequisite stage, 5 for numerical failures.
"""
import argparse
import logging
import re
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import polars as pl

from .dataset import DatasetSpec, TFIDataset, generate_dataset, load_dataset, save_dataset
from .definitions import (
    CLASS_NAMES,
    DATADIR,
    DEFAULT_FS,
    DEFAULT_N_SAMPLES,
    DEFAULT_SEED,
    N_WORKERS,
    RESULTS,
    SCENARIO_SNRS,
    ContractError,
    FormatError,
    NaelError,
    ParameterDomainError,
    file_digest,
)
from .evaluation import (
    center_concentration,
    evaluate,
    fmax_distribution,
    per_class_frame,
    scenario_suite,
    summary_frame,
    write_gradient_pgms,
)
from .nael_model import NETWORKS, NaelModel, NetworkConfig
from .tensor_nn import checkpoint_digest
from .tfa import CWDConfig, tfi_pipeline, write_pgm
from .training import TrainingHyper, label_nan_dataset, train_arn, train_nan, train_prn
from .waveform import IQSignal

PREREQUISITES = {"prn": (), "nan": ("prn",), "arn": ("prn",)}
FS_RELATIVE = re.compile(r"^(?P<num>\d+(?:\.\d+)?)?\s*\*?\s*fs\s*(?:/\s*(?P<den>\d+(?:\.\d+)?))?$")


def parse_frequency(text: str, fs: float) -> float:
    """
    Reads a frequency in Hz, or relative to the sampling rate.

    Examples
    --------
    >>> parse_frequency("fs/8", 10e6)
    1250000.0
    >>> parse_frequency("3fs/40", 10e6)
    750000.0
    >>> parse_frequency("2.5e6", 10e6)
    2500000.0
    """
    text = text.strip().lower()
    match = FS_RELATIVE.match(text)
    if match and Fraction(match["den"] or 1) != 0:
        ratio = Fraction(match["num"] or 1) / Fraction(match["den"] or 1)
        return float(ratio * Fraction(fs))
    try:
        return float(text)
    except ValueError:
        raise ParameterDomainError(f"cannot read frequency {text!r}, use Hz or a form like 3fs/40") from None


def _network_config(args) -> NetworkConfig:
    return NetworkConfig.compact() if args.compact else NetworkConfig()


def _processes(args) -> int:
    return N_WORKERS if args.threads is None else max(1, min(args.threads, N_WORKERS))


def _spec_from_args(args, per_class: int | None = None, snr_range=None) -> DatasetSpec:
    if getattr(args, "spec", None) is not None:
        return DatasetSpec.from_ini(args.spec)
    size = args.image_size or _network_config(args).input_shape[1]
    return DatasetSpec(
        per_class=per_class if per_class is not None else args.per_class,
        fs=args.fs,
        n_samples=args.samples,
        snr_range=snr_range if snr_range is not None else (args.snr_low, args.snr_high),
        seed=args.seed,
        tfi=CWDConfig(out_height=size, out_width=size),
    )


def _load_model(args, networks) -> NaelModel:
    return NaelModel(_network_config(args), seed=args.seed).load(args.checkpoints, networks)


def _read_dataset(path: Path) -> TFIDataset:
    """Reads `path`, or `DATADIR/path` when `path` is relative and only exists there"""
    path = Path(path)
    if not path.is_absolute() and not path.exists() and DATADIR.joinpath(path).is_file():
        logging.debug(f"Reading {path} from DATADIR {DATADIR}")
        path = DATADIR.joinpath(path)
    if not path.is_file():
        raise ContractError(f"no dataset file at {path}")
    return load_dataset(path)


def cmd_dataset_gen(args) -> int:
    spec = _spec_from_args(args)
    dataset = generate_dataset(spec, processes=_processes(args))
    path = save_dataset(dataset, args.output)
    print(f"{len(dataset)} records written to {path}, sha256 {file_digest(path)}")
    return 0


def cmd_train(args) -> int:
    network = args.network
    model = _load_model(args, PREREQUISITES[network])
    dataset = _read_dataset(args.dataset)
    hyper = TrainingHyper(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    if network == "prn":
        history = train_prn(model, dataset, hyper)
    elif network == "nan":
        history = train_nan(model, label_nan_dataset(model, dataset), hyper)
    else:
        history = train_arn(model, dataset, hyper)
    (checkpoint,) = model.save(args.checkpoints, [network])
    history_path = Path(args.history) if args.history else Path(args.checkpoints) / f"{network}_history.csv"
    history.write_csv(history_path)
    updates = int(history["updates"].max())
    logging.info(f"{network}: {updates} updates")
    final = history.filter(pl.col("split") == "train").row(-1, named=True)
    print(f"{network} trained, {updates} updates, final loss {final['loss']:.4f}, accuracy {final['accuracy']:.3f}")
    print(f"checkpoint {checkpoint}, sha256 {checkpoint_digest(checkpoint)}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args, NETWORKS)
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    if args.dataset is not None:
        dataset = _read_dataset(args.dataset)
        evaluations = [evaluate(model, dataset, batch_size=args.batch_size)]
        evaluations[0].confusion.write_csv(output / "confusion.csv")
        evaluations[0].decisions_frame().write_csv(output / "decisions.csv")
        if args.pgm:
            write_gradient_pgms(model, dataset, output / "gradient_maps")
    else:
        base = _spec_from_args(args)
        evaluations = scenario_suite(
            model, args.scenarios, base, per_class=args.per_class, processes=_processes(args), batch_size=args.batch_size
        )
        for e in evaluations:
            e.confusion.write_csv(output / f"confusion_{e.report.snr_db:g}dB.csv")
    summary = summary_frame(evaluations)
    summary.write_csv(output / "summary.csv")
    per_class_frame(evaluations).write_csv(output / "per_class.csv")
    print(summary.select("snr_db", "pcc", "mean_mflops", "arn_rate"))
    if args.fmax:
        (fmax_eval,) = scenario_suite(
            model, [-15.0], _spec_from_args(args), per_class=50, processes=_processes(args), batch_size=args.batch_size
        )
        fmax_distribution(fmax_eval.decisions, fmax_eval.labels).write_csv(output / "fmax.csv")
        correct, incorrect = center_concentration(fmax_eval.decisions, fmax_eval.labels)
        print(f"center f_max share at -15 dB: {correct:.3f} among correct, {incorrect:.3f} among incorrect")
    return 0


def _read_iq(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        raise FormatError("empty IQ file", 0)
    if len(raw) % 8:
        raise FormatError("IQ file is not a whole number of complex64 samples", len(raw) - len(raw) % 8)
    return np.frombuffer(raw, dtype="<c8").astype(np.complex128)


def cmd_infer(args) -> int:
    model = _load_model(args, NETWORKS)
    if args.iq is not None:
        if args.fc is None:
            raise ParameterDomainError("--fc is needed with --iq")
        _, height, width = model.config.input_shape
        signal = IQSignal(_read_iq(args.iq), args.fs)
        tfi = tfi_pipeline(signal, parse_frequency(args.fc, args.fs), CWDConfig(out_height=height, out_width=width))
        decision = model.nael_infer(tfi)
    else:
        dataset = _read_dataset(args.dataset)
        if not 0 <= args.index < len(dataset):
            raise ParameterDomainError(f"record index {args.index} out of range for {len(dataset)} records")
        decision = model.nael_infer(dataset.tfis[args.index])
    print(f"{decision.class_name}\t{decision.verdict}\t{decision.flops_spent}")
    return 0


def cmd_explain(args) -> int:
    model = _load_model(args, ("prn",))
    dataset = _read_dataset(args.dataset)
    if not 0 <= args.index < len(dataset):
        raise ParameterDomainError(f"record index {args.index} out of range for {len(dataset)} records")
    gradient_map = model.explain(dataset.tfis[args.index])
    prefix = Path(args.output) if args.output else RESULTS / f"explain_{args.index:06d}"
    prefix.parent.mkdir(parents=True, exist_ok=True)
    gradient_map.to_frame().write_csv(prefix.with_suffix(".csv"), include_header=False)
    write_pgm(gradient_map.values, prefix.with_suffix(".pgm"))
    print(f"{CLASS_NAMES[gradient_map.class_index]}\tf_max {gradient_map.f_max}\t{prefix.with_suffix('.csv')}")
    return 0


def cmd_flops(args) -> int:
    model = NaelModel(_network_config(args), seed=args.seed)
    report = model.flops_report()
    if args.output:
        report.table.write_csv(args.output)
    print(report.totals())
    print(f"base {model.base_flops / 1e6:.3f} MFLOPs, ARN adds {model.arn_marginal_flops / 1e6:.3f} MFLOPs")
    return 0


def _add_spec_arguments(parser: argparse.ArgumentParser, per_class: int) -> None:
    group = parser.add_argument_group("simulated data")
    group.add_argument("--per-class", type=int, default=per_class, help="records per modulation scheme")
    group.add_argument("--fs", type=float, default=DEFAULT_FS, help="sampling rate in Hz")
    group.add_argument("--samples", type=int, default=DEFAULT_N_SAMPLES, help="samples per signal")
    group.add_argument("--snr-low", type=float, default=-15.0, help="lowest SNR in dB")
    group.add_argument("--snr-high", type=float, default=5.0, help="highest SNR in dB")
    group.add_argument("--image-size", type=int, default=None, help="TFI height and width, 32 with --compact and 128 otherwise")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--threads", type=int, default=None, help="cap on worker processes")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help="master seed (env NAEL_SEED)")
    common.add_argument("--compact", action="store_true", help="32x32 networks instead of the 128x128 ones")

    checkpoints = argparse.ArgumentParser(add_help=False)
    checkpoints.add_argument(
        "--checkpoints", type=Path, default=RESULTS / "checkpoints", help="directory of prn.ckpt, nan.ckpt, arn.ckpt"
    )

    parser = argparse.ArgumentParser(prog="nael", description="Noise-aware LPI radar modulation recognition")
    commands = parser.add_subparsers(dest="command", required=True)

    dataset = commands.add_parser("dataset", help="dataset files")
    dataset_commands = dataset.add_subparsers(dest="action", required=True)
    gen = dataset_commands.add_parser("gen", parents=[common], help="generate a simulated dataset")
    _add_spec_arguments(gen, per_class=500)
    gen.add_argument("--spec", type=Path, default=None, help="ini file with a [dataset] section, overrides the flags")
    gen.add_argument("-o", "--output", type=Path, required=True, help="dataset file to write")
    gen.set_defaults(func=cmd_dataset_gen)

    train = commands.add_parser("train", parents=[common, checkpoints], help="train one network")
    train.add_argument("network", choices=NETWORKS)
    train.add_argument("dataset", type=Path)
    train.add_argument("--epochs", type=int, default=TrainingHyper.epochs)
    train.add_argument("--batch-size", type=int, default=TrainingHyper.batch_size)
    train.add_argument("--lr", type=float, default=TrainingHyper.lr)
    train.add_argument("--val-fraction", type=float, default=0.0, help="stratified validation holdout")
    train.add_argument("--history", type=Path, default=None, help="history CSV, next to the checkpoint by default")
    train.set_defaults(func=cmd_train)

    evaluate_parser = commands.add_parser("eval", parents=[common, checkpoints], help="score the ensemble")
    evaluate_parser.add_argument("dataset", type=Path, nargs="?", default=None, help="test set, else simulated scenarios")
    evaluate_parser.add_argument(
        "--scenarios", type=float, nargs="+", default=list(SCENARIO_SNRS), help="fixed SNRs of the simulated test sets"
    )
    _add_spec_arguments(evaluate_parser, per_class=100)
    evaluate_parser.add_argument("-o", "--output", type=Path, default=RESULTS, help="directory of the CSV outputs")
    evaluate_parser.add_argument("--batch-size", type=int, default=64)
    evaluate_parser.add_argument("--pgm", action="store_true", help="dump the gradient maps NAN flags")
    evaluate_parser.add_argument("--fmax", action="store_true", help="f_max distribution at -15 dB")
    evaluate_parser.set_defaults(func=cmd_eval)

    infer = commands.add_parser("infer", parents=[common, checkpoints], help="classify one record or IQ file")
    source = infer.add_mutually_exclusive_group(required=True)
    source.add_argument("--dataset", type=Path, help="dataset file, with --index")
    source.add_argument("--iq", type=Path, help="raw little-endian complex64 samples")
    infer.add_argument("--index", type=int, default=0)
    infer.add_argument("--fs", type=float, default=DEFAULT_FS, help="sampling rate of the IQ file")
    infer.add_argument("--fc", type=str, default=None, help="nominal center frequency, Hz or e.g. fs/8")
    infer.set_defaults(func=cmd_infer)

    explain = commands.add_parser("explain", parents=[common, checkpoints], help="gradient map of one record")
    explain.add_argument("dataset", type=Path)
    explain.add_argument("--index", type=int, default=0)
    explain.add_argument("-o", "--output", type=Path, default=None, help="output prefix, .csv and .pgm are appended")
    explain.set_defaults(func=cmd_explain)

    flops = commands.add_parser("flops", parents=[common], help="static cost per network")
    flops.add_argument("-o", "--output", type=Path, default=None, help="per-layer CSV")
    flops.set_defaults(func=cmd_flops)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except NaelError as error:
        print(f"nael {args.command}: {error}", file=sys.stderr)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
