# coding: utf-8
"""
Scoring of the routed ensemble: confusion matrices, PCC, mean cost per inference, SNR estimation, simulated scenario suites and the distribution of gradient-map peaks.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import polars as pl
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from .dataset import DatasetSpec, TFIDataset, generate_dataset
from .definitions import (
    CLASS_NAMES,
    N_WORKERS,
    NUM_CLASSES,
    SCENARIO_SNRS,
    SNR_GRID,
    CompatibilityError,
    ParameterDomainError,
    Timer,
    UndefinedSNRError,
)
from .nael_model import NaelDecision, NaelModel
from .tfa import write_pgm


@dataclass
class ConfusionMatrix:
    """
    Counts indexed [predicted, actual]: rows are predicted classes, columns actual ones.
    """

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], actual: Sequence[int]) -> "ConfusionMatrix":
        counts = confusion_matrix(np.asarray(actual), np.asarray(predicted), labels=np.arange(NUM_CLASSES))
        return cls(counts.T.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def pcc(self) -> float:
        """Percent of correct classifications"""
        return 100.0 * np.trace(self.counts) / self.total if self.total else float("nan")

    def per_class_accuracy(self) -> np.ndarray:
        """Diagonal over column sums, NaN for classes absent from the test set"""
        support = self.counts.sum(axis=0)
        return np.divide(
            np.diag(self.counts).astype(np.float64),
            support,
            out=np.full(NUM_CLASSES, np.nan),
            where=support > 0,
        )

    def to_frame(self) -> pl.DataFrame:
        frame = pl.DataFrame({name: self.counts[:, j] for j, name in enumerate(CLASS_NAMES)})
        return frame.insert_column(0, pl.Series("predicted", list(CLASS_NAMES)))

    def write_csv(self, path: Path | str) -> Path:
        path = Path(path)
        self.to_frame().write_csv(path)
        return path


@dataclass
class ScenarioReport:
    """
    Attributes
    ----------
    snr_db : float | None
        Fixed SNR of the scenario, None for a mixed test set
    n : int
        Number of inferences
    pcc : float
        Percent correct of the routed ensemble
    mean_mflops : float
        Mean per-inference cost in millions of multiply-accumulates
    arn_count : int
        Inferences routed to ARN
    arn_rate : float
        arn_count / n
    per_class_accuracy : tuple[float, ...]
        In class order
    per_class_arn_calls : tuple[int, ...]
        Inferences routed to ARN per actual class, in class order
    runtime_s : float
        Wall time of the evaluation
    prn_pcc : float
        Percent correct of the PRN decisions alone
    always_arn_pcc : float
        Percent correct when every input goes through ARN, NaN if not computed
    always_arn_mflops : float
        Cost of an inference that always runs ARN
    """

    snr_db: float | None
    n: int
    pcc: float
    mean_mflops: float
    arn_count: int
    arn_rate: float
    per_class_accuracy: tuple[float, ...]
    per_class_arn_calls: tuple[int, ...]
    runtime_s: float
    prn_pcc: float
    always_arn_pcc: float
    always_arn_mflops: float

    def as_row(self) -> dict:
        return {
            "snr_db": self.snr_db,
            "pcc": self.pcc,
            "mean_mflops": self.mean_mflops,
            "arn_rate": self.arn_rate,
            "arn_count": self.arn_count,
            "n": self.n,
            "prn_pcc": self.prn_pcc,
            "always_arn_pcc": self.always_arn_pcc,
            "always_arn_mflops": self.always_arn_mflops,
        }


@dataclass
class Evaluation:
    report: ScenarioReport
    confusion: ConfusionMatrix
    decisions: list[NaelDecision]
    labels: np.ndarray

    def decisions_frame(self) -> pl.DataFrame:
        """One row per inference"""
        return pl.DataFrame(
            {
                "index": np.arange(len(self.decisions)),
                "actual": [CLASS_NAMES[label] for label in self.labels],
                "predicted": [d.class_name for d in self.decisions],
                "prn_predicted": [CLASS_NAMES[d.prn_class] for d in self.decisions],
                "verdict": [d.verdict for d in self.decisions],
                "p_reliable": [d.nan_probs[0] for d in self.decisions],
                "flops": [d.flops_spent for d in self.decisions],
                "f_max": [d.f_max for d in self.decisions],
            }
        )


def evaluate(
    model: NaelModel,
    dataset: TFIDataset,
    batch_size: int = 64,
    snr_db: float | None = None,
    baselines: bool = True,
) -> Evaluation:
    """
    Routed inference on every record, aggregated in record order.

    Parameters
    ----------
    model : NaelModel
        With trained PRN, NAN and ARN
    dataset : TFIDataset
        Test records
    batch_size : int, optional
        Records per forward pass, does not change the results
    snr_db : float, optional
        SNR label of the report
    baselines : bool, optional
        Also score ARN on every record, by default True

    Raises
    ------
    CompatibilityError
        If the dataset images do not fit the networks
    """
    if len(dataset) == 0:
        raise ParameterDomainError("cannot evaluate on an empty dataset")
    if tuple(dataset.image_shape) != tuple(model.config.input_shape[1:]):
        raise CompatibilityError(
            f"dataset images are {dataset.image_shape}, the networks expect {model.config.input_shape[1:]}"
        )
    decisions, always_arn = [], []
    with Timer(logger=None) as timer:
        for start in tqdm(range(0, len(dataset), batch_size), desc="evaluation"):
            stage = model.prn_stage(dataset.tfis[start : start + batch_size])
            decisions.extend(model.decide(stage))
            if baselines:
                _, arn_probs = model.arn_forward(stage.intermediates)
                always_arn.append(arn_probs.argmax(axis=1))
    labels = dataset.labels.astype(np.int64)
    predicted = np.array([d.predicted_class for d in decisions])
    confusion = ConfusionMatrix.from_predictions(predicted, labels)
    used = np.array([d.used_arn for d in decisions])
    flops = np.array([d.flops_spent for d in decisions], dtype=np.int64)
    prn_predicted = np.array([d.prn_class for d in decisions])
    always_arn_pcc = 100.0 * np.mean(np.concatenate(always_arn) == labels) if baselines else float("nan")
    report = ScenarioReport(
        snr_db=snr_db,
        n=len(decisions),
        pcc=confusion.pcc,
        mean_mflops=flops.sum() / len(flops) / 1e6,
        arn_count=int(used.sum()),
        arn_rate=float(used.mean()),
        per_class_accuracy=tuple(confusion.per_class_accuracy().tolist()),
        per_class_arn_calls=tuple(np.bincount(labels[used], minlength=NUM_CLASSES).tolist()),
        runtime_s=timer.elapsed,
        prn_pcc=100.0 * float(np.mean(prn_predicted == labels)),
        always_arn_pcc=float(always_arn_pcc),
        always_arn_mflops=(model.base_flops + model.arn_marginal_flops) / 1e6,
    )
    logging.info(
        f"PCC {report.pcc:.1f}% at {report.mean_mflops:.2f} MFLOPs, ARN on {report.arn_count}/{report.n}"
        + ("" if snr_db is None else f" ({snr_db:g} dB)")
    )
    return Evaluation(report, confusion, decisions, labels)


def estimate_snr(signal_plus_noise_power: float, noise_power: float) -> float:
    """
    SNR in dB from the power of a capture and the power of a signal-free capture of the same channel.

    Raises
    ------
    UndefinedSNRError
        If a power is not positive or the capture is not stronger than the noise

    Examples
    --------
    >>> estimate_snr(2.0, 1.0)
    0.0
    """
    py, pn = float(signal_plus_noise_power), float(noise_power)
    if not (py > 0 and pn > 0):
        raise UndefinedSNRError(f"powers must be positive, got {py} and {pn}")
    if py <= pn:
        raise UndefinedSNRError(f"capture power {py} does not exceed noise power {pn}")
    return float(10 * np.log10((py - pn) / pn))


def estimate_snr_from_samples(received: np.ndarray, noise_only: np.ndarray) -> float:
    """`estimate_snr` on mean squared magnitudes"""
    return estimate_snr(np.mean(np.abs(received) ** 2), np.mean(np.abs(noise_only) ** 2))


def scenario_suite(
    model: NaelModel,
    snrs: Sequence[float] = SCENARIO_SNRS,
    base_spec: DatasetSpec | None = None,
    per_class: int = 100,
    processes: int = N_WORKERS,
    batch_size: int = 64,
) -> list[Evaluation]:
    """
    Evaluates on a fresh simulated test set at each fixed SNR.

    Test sets use `base_spec` (sampling rate, length, TFI settings) with the seed shifted past the training one, so they never share records with a training set generated from `base_spec`.
    """
    if base_spec is None:
        base_spec = DatasetSpec()
    evaluations = []
    for i, snr in enumerate(snrs):
        spec = replace(base_spec, per_class=per_class, snr_range=(snr, snr), seed=base_spec.seed + 1 + i)
        dataset = generate_dataset(spec, processes=processes)
        evaluations.append(evaluate(model, dataset, batch_size=batch_size, snr_db=float(snr)))
    return evaluations


def snr_grid_suite(model: NaelModel, grid: Sequence[float] = SNR_GRID, **kwargs) -> list[Evaluation]:
    """`scenario_suite` over a regular SNR grid, for the ARN activation trend"""
    return scenario_suite(model, grid, **kwargs)


def summary_frame(evaluations: Sequence[Evaluation]) -> pl.DataFrame:
    """One row per scenario, without runtimes so that reruns write identical files"""
    return pl.DataFrame([e.report.as_row() for e in evaluations])


def per_class_frame(evaluations: Sequence[Evaluation]) -> pl.DataFrame:
    """Accuracy and ARN call count per modulation scheme, two columns per scenario"""
    columns = {"scheme": list(CLASS_NAMES)}
    for e in evaluations:
        key = "accuracy" if e.report.snr_db is None else f"{e.report.snr_db:g}dB"
        columns[key] = list(e.report.per_class_accuracy)
        columns[f"{key}_arn_calls"] = list(e.report.per_class_arn_calls)
    return pl.DataFrame(columns)


def fmax_distribution(decisions: Sequence[NaelDecision], labels: Sequence[int], rows: int = 8) -> pl.DataFrame:
    """
    Counts of f_max per frequency row, split by whether the PRN classified correctly.

    Returns
    -------
    pl.DataFrame
        Columns f_max, correct, incorrect
    """
    labels = np.asarray(labels)
    rows_hit = np.array([d.f_max for d in decisions], dtype=np.int64)
    correct = np.array([d.prn_class for d in decisions]) == labels
    return pl.DataFrame(
        {
            "f_max": np.arange(rows),
            "correct": np.bincount(rows_hit[correct], minlength=rows)[:rows],
            "incorrect": np.bincount(rows_hit[~correct], minlength=rows)[:rows],
        }
    )


def center_concentration(
    decisions: Sequence[NaelDecision],
    labels: Sequence[int],
    center_rows: Sequence[int] = (3, 4),
) -> tuple[float, float]:
    """
    Fraction of f_max on the center rows among correct and among incorrect PRN classifications. NaN when a group is empty.
    """
    distribution = fmax_distribution(decisions, labels)
    centered = distribution.filter(pl.col("f_max").is_in(list(center_rows)))
    fractions = []
    for column in ("correct", "incorrect"):
        total = distribution[column].sum()
        fractions.append(centered[column].sum() / total if total else float("nan"))
    return fractions[0], fractions[1]


def write_gradient_pgms(
    model: NaelModel,
    dataset: TFIDataset,
    directory: Path | str,
    only_flagged: bool = True,
    batch_size: int = 64,
) -> list[Path]:
    """
    Dumps the PRN gradient map of the records NAN flags as unreliable (or of every record) as graymaps named `<index>_<actual>_<prn class>.pgm`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for start in range(0, len(dataset), batch_size):
        stage = model.prn_stage(dataset.tfis[start : start + batch_size])
        verdicts, _ = model.nan_forward(stage.maps)
        for offset, values in enumerate(stage.maps):
            if only_flagged and not verdicts[offset]:
                continue
            index = start + offset
            name = f"{index:06d}_{CLASS_NAMES[dataset.labels[index]]}_{CLASS_NAMES[stage.predicted[offset]]}.pgm"
            paths.append(write_pgm(values, directory / name))
    logging.info(f"Wrote {len(paths)} gradient maps to {directory}")
    return paths
