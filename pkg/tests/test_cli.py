# coding: utf-8
import numpy as np
import polars as pl
import pytest

from naelutils import cli
from naelutils.cli import main, parse_frequency
from naelutils.dataset import load_dataset
from naelutils.definitions import CLASS_NAMES, ContractError, DegenerateLabelError, DependencyError, ParameterDomainError
from naelutils.nael_model import NaelModel, NetworkConfig
from naelutils.tensor_nn import checkpoint_digest

FS = 10e6
SMALL = ["--compact", "--image-size", "32", "--samples", "256", "--threads", "1"]


@pytest.mark.parametrize(
    "text, expected",
    [("fs/8", 1_250_000.0), ("3fs/40", 750_000.0), ("fs/4", 2_500_000.0), ("1.5e6", 1_500_000.0)],
)
def test_parse_frequency(text, expected):
    assert parse_frequency(text, FS) == pytest.approx(expected)


@pytest.mark.parametrize("text", ["abc", "fs/0", "fs/", "-fs/8"])
def test_parse_frequency_rejects(text):
    with pytest.raises(ParameterDomainError):
        parse_frequency(text, FS)


def test_usage_errors_exit_with_2():
    with pytest.raises(SystemExit) as info:
        main(["dataset", "gen"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["train", "xyz", "data.bin"])
    assert info.value.code == 2


def test_missing_prerequisite(tmp_path, capsys):
    code = main(["train", "nan", str(tmp_path / "data.bin"), "--checkpoints", str(tmp_path / "ckpt"), "--compact"])
    assert code == DependencyError.exit_code
    assert "prn" in capsys.readouterr().err


def test_flops_table(tmp_path, capsys):
    output = tmp_path / "flops.csv"
    assert main(["flops", "--compact", "-o", str(output)]) == 0
    table = pl.read_csv(output)
    assert set(table["network"]) == {"prn", "gradient_map", "nan", "arn"}
    assert table.columns == ["network", "layer", "kind", "out_h", "out_w", "flops"]
    assert "MFLOPs" in capsys.readouterr().out


def test_dataset_gen_is_reproducible(tmp_path):
    first, second = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["dataset", "gen", "-o", str(first), "--per-class", "1", "--seed", "7", *SMALL]) == 0
    assert main(["dataset", "gen", "-o", str(second), "--per-class", "1", "--seed", "7", *SMALL]) == 0
    assert first.read_bytes() == second.read_bytes()
    assert len(load_dataset(first)) == 12


def test_compact_sets_the_image_size(tmp_path):
    data = tmp_path / "compact.bin"
    assert main(["dataset", "gen", "-o", str(data), "--per-class", "1", "--compact", "--samples", "256", "--threads", "1"]) == 0
    assert load_dataset(data).image_shape == (32, 32)


def test_datasets_are_found_in_datadir(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "DATADIR", tmp_path / "data")
    monkeypatch.chdir(tmp_path)
    ckpt = tmp_path / "ckpt"
    assert main(["dataset", "gen", "-o", str(tmp_path / "data" / "small.bin"), "--per-class", "1", *SMALL]) == 0
    NaelModel(NetworkConfig.compact(), seed=0).save(ckpt)
    infer = ["infer", "--dataset", "small.bin", "--checkpoints", str(ckpt), "--compact"]
    assert main([*infer, "--index", "11"]) == 0
    assert main([*infer, "--index", "12"]) == ParameterDomainError.exit_code
    assert main(["infer", "--dataset", "missing.bin", "--checkpoints", str(ckpt), "--compact"]) == ContractError.exit_code


@pytest.mark.slow
def test_end_to_end(tmp_path, capsys):
    data = tmp_path / "data.bin"
    ckpt = tmp_path / "ckpt"
    assert main(["dataset", "gen", "-o", str(data), "--per-class", "2", *SMALL]) == 0
    assert "24 records written" in capsys.readouterr().out
    assert len(load_dataset(data)) == 24

    train = ["--checkpoints", str(ckpt), "--epochs", "2", "--batch-size", "8", "--compact"]
    assert main(["train", "prn", str(data), *train]) == 0
    history = pl.read_csv(ckpt / "prn_history.csv")
    assert history.height == 2
    assert history["updates"].to_list() == [3, 6]
    prn_digest = checkpoint_digest(ckpt / "prn.ckpt")

    code = main(["train", "nan", str(data), *train])
    if code == DegenerateLabelError.exit_code:
        # an untrained PRN can be right on every record or on none
        model = NaelModel(NetworkConfig.compact(), seed=0).load(ckpt, ["prn"])
        model.save(ckpt, ["nan"])
    else:
        assert code == 0
    assert main(["train", "arn", str(data), *train]) == 0
    assert {p.name for p in ckpt.glob("*.ckpt")} == {"prn.ckpt", "nan.ckpt", "arn.ckpt"}
    assert checkpoint_digest(ckpt / "prn.ckpt") == prn_digest
    capsys.readouterr()

    results = tmp_path / "results"
    assert main(["eval", str(data), "-o", str(results), "--checkpoints", str(ckpt), "--compact"]) == 0
    summary = pl.read_csv(results / "summary.csv")
    assert summary.height == 1
    assert summary["n"][0] == 24
    assert 0 <= summary["pcc"][0] <= 100
    assert (results / "per_class.csv").exists()
    assert pl.read_csv(results / "decisions.csv").height == 24
    assert len((results / "confusion.csv").read_text().strip().splitlines()) == 13
    again = tmp_path / "again"
    assert main(["eval", str(data), "-o", str(again), "--checkpoints", str(ckpt), "--compact"]) == 0
    for name in ("summary.csv", "per_class.csv", "confusion.csv", "decisions.csv"):
        assert (again / name).read_bytes() == (results / name).read_bytes()
    capsys.readouterr()

    assert main(["infer", "--dataset", str(data), "--index", "3", "--checkpoints", str(ckpt), "--compact"]) == 0
    name, verdict, flops = capsys.readouterr().out.strip().split("\t")
    assert name in CLASS_NAMES
    assert verdict in ("reliable", "unreliable")
    assert int(flops) > 0

    prefix = tmp_path / "explain" / "record3"
    assert main(["explain", str(data), "--index", "3", "-o", str(prefix), "--checkpoints", str(ckpt), "--compact"]) == 0
    values = np.loadtxt(prefix.with_suffix(".csv"), delimiter=",")
    assert values.shape == (8, 8)
    assert values.min() >= 0
    assert prefix.with_suffix(".pgm").read_bytes().startswith(b"P5\n8 8\n255\n")
