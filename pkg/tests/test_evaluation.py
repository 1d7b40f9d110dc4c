# coding: utf-8
from dataclasses import replace

import numpy as np
import polars as pl
import pytest
from numpy.testing import assert_array_equal

from naelutils.dataset import generate_dataset
from naelutils.definitions import SNR_GRID, CompatibilityError, ParameterDomainError, UndefinedSNRError
from naelutils.evaluation import (
    ConfusionMatrix,
    center_concentration,
    estimate_snr,
    estimate_snr_from_samples,
    evaluate,
    fmax_distribution,
    per_class_frame,
    scenario_suite,
    snr_grid_suite,
    summary_frame,
    write_gradient_pgms,
)
from naelutils.nael_model import NaelDecision, NaelModel, NetworkConfig, PRNStageResult
from naelutils.training import TrainingHyper, label_nan_dataset, train_arn, train_nan, train_prn


def test_estimate_snr():
    assert estimate_snr(2.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert estimate_snr(1.01, 1.0) == pytest.approx(-20.0, abs=1e-9)
    for powers in [(1.0, 1.0), (0.5, 1.0), (2.0, 0.0), (-1.0, 1.0)]:
        with pytest.raises(UndefinedSNRError):
            estimate_snr(*powers)


def test_estimate_snr_from_samples():
    rng = np.random.default_rng(0)
    noise = (rng.standard_normal(200_000) + 1j * rng.standard_normal(200_000)) / np.sqrt(2)
    tone = np.exp(2j * np.pi * 0.1 * np.arange(200_000))
    received = tone + (rng.standard_normal(200_000) + 1j * rng.standard_normal(200_000)) / np.sqrt(2)
    assert estimate_snr_from_samples(received, noise) == pytest.approx(0.0, abs=0.1)


def test_confusion_matrix_orientation():
    confusion = ConfusionMatrix.from_predictions([1, 0, 0], [0, 0, 5])
    assert confusion.counts[1, 0] == 1
    assert confusion.counts[0, 0] == 1
    assert confusion.counts[0, 5] == 1
    assert confusion.total == 3
    assert confusion.pcc == pytest.approx(100 / 3)
    accuracy = confusion.per_class_accuracy()
    assert accuracy[0] == 0.5 and accuracy[5] == 0.0
    assert np.isnan(accuracy[2])


def test_confusion_csv(tmp_path):
    labels = np.repeat(np.arange(12), 2)
    confusion = ConfusionMatrix.from_predictions(labels, labels)
    assert_array_equal(confusion.counts, 2 * np.eye(12))
    path = confusion.write_csv(tmp_path / "confusion.csv")
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 13
    assert all(len(line.split(",")) == 13 for line in lines)
    assert lines[0].startswith("predicted,LFM,Costas")


class PerfectPRN:
    """prn_stage replacement that reads the true labels in evaluation order"""

    def __init__(self, labels):
        self.labels = labels
        self.position = 0

    def __call__(self, tfis):
        n = len(tfis)
        predicted = self.labels[self.position : self.position + n].astype(int)
        self.position += n
        maps = np.zeros((n, 8, 8))
        maps[:, 3, :] = 1.0
        return PRNStageResult(np.eye(12)[predicted], predicted, maps, [])


def test_evaluate_perfect_stub(model64, tiny_dataset, monkeypatch):
    monkeypatch.setattr(model64, "prn_stage", PerfectPRN(tiny_dataset.labels))
    monkeypatch.setattr(model64, "nan_forward", lambda maps: (np.zeros(len(maps), dtype=int), np.tile([0.7, 0.3], (len(maps), 1))))
    evaluation = evaluate(model64, tiny_dataset, batch_size=50, baselines=False)
    assert_array_equal(evaluation.confusion.counts, 10 * np.eye(12))
    report = evaluation.report
    assert report.pcc == 100.0
    assert report.prn_pcc == 100.0
    assert report.arn_count == 0
    assert report.per_class_arn_calls == (0,) * 12
    assert report.mean_mflops == pytest.approx(model64.base_flops / 1e6)
    assert np.isnan(report.always_arn_pcc)
    assert all(d.f_max == 3 for d in evaluation.decisions)
    assert evaluation.decisions_frame().shape == (120, 8)


def test_arn_calls_per_scheme(model64, tiny_dataset, monkeypatch):
    def every_third(maps):
        verdicts = (np.arange(len(maps)) % 3 == 0).astype(int)
        return verdicts, np.eye(2)[verdicts]

    monkeypatch.setattr(model64, "nan_forward", every_third)
    evaluation = evaluate(model64, tiny_dataset, batch_size=30, snr_db=-15.0, baselines=False)
    flagged = tiny_dataset.labels[np.arange(120) % 3 == 0].astype(int)
    assert evaluation.report.arn_count == 40
    assert evaluation.report.per_class_arn_calls == tuple(np.bincount(flagged, minlength=12).tolist())
    frame = per_class_frame([evaluation])
    assert frame["-15dB_arn_calls"].to_list() == list(evaluation.report.per_class_arn_calls)


def test_evaluate_cost_identity(model64, tiny_dataset):
    evaluation = evaluate(model64, tiny_dataset[:24], batch_size=10, snr_db=-4.0)
    report = evaluation.report
    assert report.n == 24
    expected = model64.base_flops + report.arn_rate * model64.arn_marginal_flops
    assert report.mean_mflops * 1e6 == pytest.approx(expected)
    assert report.always_arn_mflops * 1e6 == model64.base_flops + model64.arn_marginal_flops
    assert 0 <= report.always_arn_pcc <= 100
    assert evaluation.confusion.total == 24
    summary = summary_frame([evaluation])
    assert "runtime_s" not in summary.columns
    assert summary["snr_db"][0] == -4.0
    assert sum(report.per_class_arn_calls) == report.arn_count
    frame = per_class_frame([evaluation])
    assert frame.columns == ["scheme", "-4dB", "-4dB_arn_calls"]
    assert frame["-4dB_arn_calls"].sum() == report.arn_count


def test_evaluate_rejects_bad_datasets(model64, tiny_dataset):
    with pytest.raises(ParameterDomainError):
        evaluate(model64, tiny_dataset[:0])
    with pytest.raises(CompatibilityError):
        evaluate(NaelModel(seed=0), tiny_dataset[:2])


def _decision(prn_class, row):
    return NaelDecision(prn_class, False, (1.0, 0.0), 0, prn_class, row)


def test_fmax_distribution():
    decisions = [_decision(0, 3), _decision(1, 4), _decision(2, 3), _decision(5, 0), _decision(7, 7)]
    labels = [0, 1, 2, 4, 6]
    distribution = fmax_distribution(decisions, labels)
    assert distribution["correct"].to_list() == [0, 0, 0, 2, 1, 0, 0, 0]
    assert distribution["incorrect"].to_list() == [1, 0, 0, 0, 0, 0, 0, 1]
    correct, incorrect = center_concentration(decisions, labels)
    assert correct == 1.0 and incorrect == 0.0
    correct, incorrect = center_concentration(decisions[:3], labels[:3])
    assert np.isnan(incorrect)


def test_write_gradient_pgms(model64, tiny_dataset, tmp_path):
    paths = write_gradient_pgms(model64, tiny_dataset[:5], tmp_path / "maps", only_flagged=False)
    assert len(paths) == 5
    assert all(p.read_bytes().startswith(b"P5\n8 8\n255\n") for p in paths)
    assert paths[0].name.startswith("000000_")


@pytest.mark.slow
def test_scenario_suite(model64, tiny_spec):
    evaluations = scenario_suite(model64, snrs=(-4.0, -15.0), base_spec=tiny_spec, per_class=1, processes=1)
    assert [e.report.snr_db for e in evaluations] == [-4.0, -15.0]
    assert all(e.report.n == 12 for e in evaluations)
    summary = summary_frame(evaluations)
    assert summary.height == 2
    assert isinstance(summary, pl.DataFrame)


def _inversions(rates):
    """Increases of the ARN rate from one grid SNR to the next"""
    steps = np.diff(np.asarray(rates))
    return steps[steps > 0]


def test_inversion_count():
    assert _inversions([0.6, 0.5, 0.51, 0.2, 0.1]).size == 1
    assert _inversions([0.6, 0.5, 0.4]).size == 0


@pytest.mark.slow
def test_trained_model_orderings(tiny_spec):
    spec = replace(tiny_spec, per_class=100, seed=11)
    train = generate_dataset(spec, processes=1, progress=False)
    held_out = generate_dataset(replace(spec, per_class=50, seed=40), processes=1, progress=False)
    model = NaelModel(NetworkConfig.compact(), seed=0)
    hyper = TrainingHyper(epochs=15, batch_size=32, lr=3e-3, seed=1)
    train_prn(model, train, hyper)
    train_nan(model, label_nan_dataset(model, held_out), hyper)
    train_arn(model, train, hyper)

    evaluations = scenario_suite(model, base_spec=spec, per_class=100, processes=1)
    reports = {e.report.snr_db: e.report for e in evaluations}
    assert reports[-4.0].pcc > reports[-15.0].pcc > reports[-17.0].pcc
    assert reports[-17.0].arn_rate > reports[-4.0].arn_rate
    for report in reports.values():
        assert report.pcc >= report.prn_pcc - 0.5
        assert report.mean_mflops <= report.always_arn_mflops

    at_15 = next(e for e in evaluations if e.report.snr_db == -15.0)
    correct, incorrect = center_concentration(at_15.decisions, at_15.labels)
    assert correct > incorrect

    grid = snr_grid_suite(model, base_spec=spec, per_class=50, processes=1)
    assert [e.report.snr_db for e in grid] == list(SNR_GRID)
    inversions = _inversions([e.report.arn_rate for e in grid])
    assert inversions.size <= 1
    assert np.all(inversions <= 0.02)
