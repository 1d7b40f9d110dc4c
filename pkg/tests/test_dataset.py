# coding: utf-8
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from naelutils.dataset import (
    HEADER,
    PARAMETER_RANGES,
    DatasetSpec,
    TFIDataset,
    generate_dataset,
    load_dataset,
    parse_dataset,
    record_seed,
    sample_params,
    save_dataset,
    split,
    split_indices,
)
from naelutils.definitions import FormatError, ParameterDomainError
from naelutils.tfa import CWDConfig
from naelutils.waveform import ModulationScheme

FS = 10e6


def test_lfm_carrier_range():
    spec = DatasetSpec(fs=FS)
    rng = np.random.default_rng(0)
    carriers = np.array([sample_params(ModulationScheme.LFM, spec, rng)[0].f_c for _ in range(20_000)])
    assert carriers.min() >= FS / 8 and carriers.max() <= FS / 4
    assert carriers.min() <= FS / 8 * 1.005
    assert carriers.max() >= FS / 4 * 0.995


def test_p2_order_is_even():
    spec = DatasetSpec(fs=FS)
    rng = np.random.default_rng(1)
    orders = {sample_params(ModulationScheme.P2, spec, rng)[0].M for _ in range(500)}
    assert orders == {6, 8}


@pytest.mark.parametrize("scheme", list(ModulationScheme))
def test_draws_respect_ranges(scheme):
    spec = DatasetSpec(fs=FS, snr_range=(-4, -4))
    rng = np.random.default_rng(int(scheme))
    for _ in range(50):
        params, snr_db = sample_params(scheme, spec, rng)
        assert snr_db == -4.0
        assert 0 <= params.phi0 < 2 * np.pi
        for name, law in PARAMETER_RANGES[scheme].items():
            assert law.contains(getattr(params, name), FS)


def test_parameter_stream_is_seeded():
    spec = DatasetSpec(fs=FS)
    first = [sample_params(ModulationScheme.COSTAS, spec, np.random.default_rng(3)) for _ in range(3)]
    second = [sample_params(ModulationScheme.COSTAS, spec, np.random.default_rng(3)) for _ in range(3)]
    assert first == second


@pytest.mark.parametrize(
    "kwargs",
    [{"per_class": 0}, {"snr_range": (5, -5)}, {"n_samples": 100}, {"fs": 0.0}, {"seed": -1}],
)
def test_spec_validation(kwargs):
    with pytest.raises(ParameterDomainError):
        DatasetSpec(**kwargs)


def test_spec_from_ini(tmp_path):
    path = tmp_path / "spec.ini"
    path.write_text("[dataset]\nper_class = 3\nn_samples = 256\nsnr_low = -4\nsnr_high = -4\nout_height = 32\nout_width = 32\nlag_window = 33\nmu_window = 17\n")
    spec = DatasetSpec.from_ini(path)
    assert spec.per_class == 3
    assert spec.snr_range == (-4.0, -4.0)
    assert spec.tfi == CWDConfig(lag_window=33, mu_window=17, out_height=32, out_width=32)
    with pytest.raises(ParameterDomainError):
        DatasetSpec.from_ini(path, section="other")


def test_record_seeds_are_distinct():
    seeds = {record_seed(7, c, i) for c in range(12) for i in range(50)}
    assert len(seeds) == 600
    assert record_seed(7, 3, 4) == record_seed(7, 3, 4)


def test_generated_dataset(tiny_dataset, tiny_spec):
    assert len(tiny_dataset) == 120
    assert_array_equal(tiny_dataset.class_counts(), 10)
    assert tiny_dataset.image_shape == (32, 32)
    assert np.all((tiny_dataset.snr_db >= -15) & (tiny_dataset.snr_db <= 5))
    # shuffled, not grouped by class
    assert not np.all(np.diff(tiny_dataset.labels.astype(int)) >= 0)
    flat = tiny_dataset.tfis.reshape(120, -1).astype(np.float64)
    assert np.all(np.abs(flat.mean(axis=1)) < 1e-5)
    assert np.all(np.abs(flat.var(axis=1) - 1) < 1e-4)
    for i in range(0, 120, 17):
        record = tiny_dataset.record(i)
        record.waveform_params().validate(record.scheme, tiny_spec.fs)


def test_generation_is_deterministic(tiny_dataset, tiny_spec):
    again = generate_dataset(tiny_spec, processes=2, progress=False)
    assert again.to_bytes() == tiny_dataset.to_bytes()


def test_dataset_frame(tiny_dataset):
    frame = tiny_dataset.to_frame()
    assert frame.shape == (120, 13)
    assert frame["scheme"][0] == ModulationScheme(int(tiny_dataset.labels[0])).tag


def test_save_and_load(tiny_dataset, tmp_path):
    path = save_dataset(tiny_dataset, tmp_path / "data" / "train.bin")
    assert path.stat().st_size == HEADER.size + 120 * (1 + 4 + 8 + 32 + 4 * 32 * 32)
    loaded = load_dataset(path)
    assert loaded.to_bytes() == path.read_bytes()
    assert_array_equal(loaded.tfis, tiny_dataset.tfis)


def test_parse_errors(tiny_dataset):
    raw = bytearray(tiny_dataset[:2].to_bytes())
    record_size = (len(raw) - HEADER.size) // 2

    def offset_of(data) -> int:
        with pytest.raises(FormatError) as info:
            parse_dataset(bytes(data))
        return info.value.offset

    assert offset_of(b"NOTADATA" + raw[8:]) == 0
    assert offset_of(raw[:10]) == 10
    bad_version = raw.copy()
    bad_version[8] = 9
    assert offset_of(bad_version) == 8
    assert offset_of(raw[:-1]) == len(raw) - 1
    assert offset_of(raw + b"\x00") == len(raw)
    bad_label = raw.copy()
    bad_label[HEADER.size + record_size] = 12
    assert offset_of(bad_label) == HEADER.size + record_size


def test_split(tiny_dataset):
    train, test = split(tiny_dataset, (0.8, 0.2), seed=5)
    assert (len(train), len(test)) == (96, 24)
    assert_array_equal(train.class_counts(), 8)
    assert_array_equal(test.class_counts(), 2)
    train_idx, test_idx = split_indices(tiny_dataset.labels, (0.8, 0.2), seed=5)
    assert np.intersect1d(train_idx, test_idx).size == 0
    assert np.union1d(train_idx, test_idx).size == 120
    again, _ = split(tiny_dataset, (0.8, 0.2), seed=5)
    assert again.to_bytes() == train.to_bytes()
    with pytest.raises(ParameterDomainError):
        split(tiny_dataset, (0.5, 0.4))


def test_mismatched_columns():
    with pytest.raises(ParameterDomainError):
        TFIDataset(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros((2, 8)), np.zeros((3, 8, 8)))
