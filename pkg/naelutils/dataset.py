# coding: utf-8
"""
Labeled TFI datasets: parameter sampling, record generation, the binary dataset file and stratified splits.

Every record is generated from its own seed, derived from the master seed, the class and the index of the record in its class, so records can be produced in any order and by any number of workers without changing the file.
"""
import configparser
import logging
import struct
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np
import polars as pl

from .definitions import (
    CLASS_NAMES,
    DATASET_MAGIC,
    DEFAULT_FS,
    DEFAULT_N_SAMPLES,
    DEFAULT_SEED,
    FORMAT_VERSION,
    N_WORKERS,
    NUM_CLASSES,
    FormatError,
    ParameterDomainError,
    map_maybe_parallel,
)
from .tfa import CWDConfig, tfi_pipeline
from .waveform import (
    TWO_PI,
    ModulationScheme,
    WaveformParams,
    add_awgn,
    nominal_center,
    synthesize,
)

HEADER = struct.Struct("<8sIIII")


@dataclass(frozen=True)
class FsUniform:
    """Uniform draw between two fractions of the sampling rate"""

    low: float
    high: float

    def draw(self, rng: np.random.Generator, fs: float) -> float:
        return float(rng.uniform(self.low * fs, self.high * fs))

    def contains(self, value: float, fs: float) -> bool:
        return self.low * fs <= value <= self.high * fs


@dataclass(frozen=True)
class Choice:
    """Uniform draw from a finite set"""

    values: tuple[int, ...]

    def draw(self, rng: np.random.Generator, fs: float) -> int:
        return int(self.values[rng.integers(len(self.values))])

    def contains(self, value: float, fs: float) -> bool:
        return value in self.values


CARRIER = FsUniform(1 / 8, 1 / 4)
SUBCODE = Choice((5, 6, 7))

PARAMETER_RANGES: dict[ModulationScheme, dict[str, FsUniform | Choice]] = {
    ModulationScheme.LFM: {"f_c": CARRIER, "B": FsUniform(1 / 20, 1 / 8)},
    ModulationScheme.COSTAS: {
        "f_min": FsUniform(1 / 40, 1 / 10),
        "L_hs": Choice((4, 6)),
        "f_hop": FsUniform(1 / 40, 3 / 40),
    },
    ModulationScheme.BARKER: {"f_c": CARRIER, "L_B": Choice((7, 11, 13)), "N_sc": Choice((20, 24, 28, 32))},
    ModulationScheme.FRANK: {"f_c": CARRIER, "N_sc": SUBCODE, "M": Choice((6, 7, 8))},
    ModulationScheme.P1: {"f_c": CARRIER, "N_sc": SUBCODE, "M": Choice((6, 7, 8))},
    ModulationScheme.P2: {"f_c": CARRIER, "N_sc": SUBCODE, "M": Choice((6, 8))},
    ModulationScheme.P3: {"f_c": CARRIER, "N_sc": SUBCODE, "N_c": Choice((36, 49, 64))},
    ModulationScheme.P4: {"f_c": CARRIER, "N_sc": SUBCODE, "N_c": Choice((36, 49, 64))},
    ModulationScheme.T1: {"f_c": CARRIER, "k_seg": Choice((5, 6, 7))},
    ModulationScheme.T2: {"f_c": CARRIER, "k_seg": Choice((5, 6, 7))},
    ModulationScheme.T3: {"f_c": CARRIER, "dF": FsUniform(1 / 20, 1 / 10)},
    ModulationScheme.T4: {"f_c": CARRIER, "dF": FsUniform(1 / 20, 1 / 10)},
}


@dataclass(frozen=True)
class DatasetSpec:
    """
    Everything a generated dataset depends on.

    Attributes
    ----------
    per_class : int
        Records per modulation scheme
    fs : float
        Sampling rate in Hz. Parameter ranges are fractions of it
    n_samples : int
        Samples per signal
    snr_range : tuple[float, float]
        SNR drawn uniformly in this interval, in dB. Equal bounds give a fixed SNR
    seed : int
        Master seed
    tfi : CWDConfig
        Time-frequency analysis settings
    """

    per_class: int = 500
    fs: float = DEFAULT_FS
    n_samples: int = DEFAULT_N_SAMPLES
    snr_range: tuple[float, float] = (-15.0, 5.0)
    seed: int = DEFAULT_SEED
    tfi: CWDConfig = field(default_factory=CWDConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "snr_range", tuple(float(s) for s in self.snr_range))
        if self.per_class < 1:
            raise ParameterDomainError(f"per_class must be positive, got {self.per_class}")
        if not self.fs > 0:
            raise ParameterDomainError(f"fs must be positive, got {self.fs}")
        low, high = self.snr_range
        if not low <= high:
            raise ParameterDomainError(f"SNR range must satisfy low <= high, got {self.snr_range}")
        if self.n_samples < self.tfi.lag_window:
            raise ParameterDomainError(
                f"n_samples ({self.n_samples}) is shorter than the CWD lag window ({self.tfi.lag_window})"
            )
        if self.seed < 0:
            raise ParameterDomainError(f"seed must be nonnegative, got {self.seed}")

    @classmethod
    def from_ini(cls, path: Path | str, section: str = "dataset") -> "DatasetSpec":
        """
        Reads a spec from an ini file. Missing keys keep their defaults.

        Recognized keys: per_class, fs, n_samples, snr_low, snr_high, seed, sigma, lag_window, mu_window, out_height, out_width.
        """
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ParameterDomainError(f"cannot read dataset spec {path}")
        if not parser.has_section(section):
            raise ParameterDomainError(f"no [{section}] section in {path}")
        conf = parser[section]
        default, default_tfi = cls(), CWDConfig()
        tfi = CWDConfig(
            sigma=conf.getfloat("sigma", default_tfi.sigma),
            lag_window=conf.getint("lag_window", default_tfi.lag_window),
            mu_window=conf.getint("mu_window", default_tfi.mu_window),
            out_height=conf.getint("out_height", default_tfi.out_height),
            out_width=conf.getint("out_width", default_tfi.out_width),
        )
        return cls(
            per_class=conf.getint("per_class", default.per_class),
            fs=conf.getfloat("fs", default.fs),
            n_samples=conf.getint("n_samples", default.n_samples),
            snr_range=(
                conf.getfloat("snr_low", default.snr_range[0]),
                conf.getfloat("snr_high", default.snr_range[1]),
            ),
            seed=conf.getint("seed", default.seed),
            tfi=tfi,
        )


@dataclass
class Record:
    """One labeled example, as stored in a dataset file"""

    class_index: int
    snr_db: float
    seed: int
    params: np.ndarray
    tfi: np.ndarray

    @property
    def scheme(self) -> ModulationScheme:
        return ModulationScheme(self.class_index)

    def waveform_params(self) -> WaveformParams:
        return WaveformParams.from_block(self.scheme, self.params)


def record_dtype(height: int, width: int) -> np.dtype:
    """Packed little-endian layout of one record"""
    return np.dtype(
        [
            ("label", "u1"),
            ("snr", "<f4"),
            ("seed", "<u8"),
            ("params", "<f4", (8,)),
            ("tfi", "<f4", (height, width)),
        ]
    )


@dataclass
class TFIDataset:
    """
    Column-wise storage of records.

    Attributes
    ----------
    labels : np.ndarray
        (N,) uint8 class indices
    snr_db : np.ndarray
        (N,) float32
    seeds : np.ndarray
        (N,) uint64 record seeds
    params : np.ndarray
        (N, 8) float32 parameter blocks
    tfis : np.ndarray
        (N, H, W) float32 normalized images
    """

    labels: np.ndarray
    snr_db: np.ndarray
    seeds: np.ndarray
    params: np.ndarray
    tfis: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.snr_db = np.asarray(self.snr_db, dtype=np.float32)
        self.seeds = np.asarray(self.seeds, dtype=np.uint64)
        self.params = np.asarray(self.params, dtype=np.float32).reshape(-1, 8)
        self.tfis = np.asarray(self.tfis, dtype=np.float32)
        n = len(self.labels)
        if not (len(self.snr_db) == len(self.seeds) == len(self.params) == len(self.tfis) == n):
            raise ParameterDomainError("dataset columns have different lengths")
        if self.tfis.ndim != 3:
            raise ParameterDomainError(f"TFIs must be stacked as (N, H, W), got {self.tfis.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index) -> "TFIDataset":
        if isinstance(index, (int, np.integer)):
            index = [index]
        return TFIDataset(
            self.labels[index], self.snr_db[index], self.seeds[index], self.params[index], self.tfis[index]
        )

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.tfis.shape[1:]

    def record(self, i: int) -> Record:
        return Record(int(self.labels[i]), float(self.snr_db[i]), int(self.seeds[i]), self.params[i], self.tfis[i])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=NUM_CLASSES)

    def to_frame(self) -> pl.DataFrame:
        """Record metadata without the images"""
        columns = {
            "index": np.arange(len(self)),
            "class_index": self.labels,
            "scheme": [CLASS_NAMES[label] for label in self.labels],
            "snr_db": self.snr_db,
            "seed": self.seeds,
        }
        for slot in range(8):
            columns[f"p{slot}"] = self.params[:, slot]
        return pl.DataFrame(columns)

    def to_records(self) -> np.ndarray:
        records = np.empty(len(self), dtype=record_dtype(*self.image_shape))
        records["label"] = self.labels
        records["snr"] = self.snr_db
        records["seed"] = self.seeds
        records["params"] = self.params
        records["tfi"] = self.tfis
        return records

    @classmethod
    def from_records(cls, records: np.ndarray) -> "TFIDataset":
        return cls(records["label"], records["snr"], records["seed"], records["params"], records["tfi"])

    def to_bytes(self) -> bytes:
        height, width = self.image_shape
        header = HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, len(self), height, width)
        return header + self.to_records().tobytes()


def sample_params(
    scheme: ModulationScheme,
    spec: DatasetSpec,
    rng: np.random.Generator,
) -> tuple[WaveformParams, float]:
    """
    Draws waveform parameters and an SNR for one record.

    Continuous parameters are uniform on their fs-relative interval, discrete ones uniform on their set, the initial phase is uniform on [0, 2pi) and the SNR uniform on `spec.snr_range`.

    Returns
    -------
    tuple[WaveformParams, float]
        Validated parameters and the SNR in dB
    """
    scheme = ModulationScheme(scheme)
    drawn = {name: law.draw(rng, spec.fs) for name, law in PARAMETER_RANGES[scheme].items()}
    phi0 = float(rng.uniform(0, TWO_PI))
    snr_db = float(rng.uniform(*spec.snr_range))
    return WaveformParams(phi0=phi0, **drawn).validate(scheme, spec.fs), snr_db


def record_seed(master_seed: int, class_index: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, class_index, index]).generate_state(1, np.uint64)[0])


def generate_record(spec: DatasetSpec, job: tuple[int, int]) -> tuple[int, float, int, np.ndarray, np.ndarray]:
    """synthesize, add_awgn, center_shift, cwd and normalize_tfi for the `index`-th record of a class"""
    class_index, index = job
    scheme = ModulationScheme(class_index)
    seed = record_seed(spec.seed, class_index, index)
    rng = np.random.default_rng(seed)
    params, snr_db = sample_params(scheme, spec, rng)
    clean = synthesize(scheme, params, spec.n_samples, spec.fs)
    noisy = add_awgn(clean, snr_db, rng_seed=int(rng.integers(2**63)), amplitude=params.A)
    tfi = tfi_pipeline(noisy, nominal_center(scheme, params), spec.tfi)
    return class_index, snr_db, seed, params.to_block(scheme), tfi.values.astype(np.float32)


def generate_dataset(spec: DatasetSpec, processes: int = N_WORKERS, progress: bool = True) -> TFIDataset:
    """
    Generates `spec.per_class` records per scheme and shuffles them deterministically.

    The output only depends on `spec`, never on `processes`.
    """
    jobs = [(c, i) for c in range(NUM_CLASSES) for i in range(spec.per_class)]
    logging.info(f"Generating {len(jobs)} records")
    results = map_maybe_parallel(
        jobs, partial(generate_record, spec), len(jobs), processes=processes, progress=progress, desc="records"
    )
    order = np.random.default_rng(spec.seed).permutation(len(results))
    results = [results[i] for i in order]
    labels, snrs, seeds, blocks, tfis = zip(*results)
    return TFIDataset(
        np.array(labels),
        np.array(snrs),
        np.array(seeds, dtype=np.uint64),
        np.stack(blocks),
        np.stack(tfis),
    )


def save_dataset(dataset: TFIDataset, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset.to_bytes())
    logging.debug(f"Wrote {len(dataset)} records to {path}")
    return path


def parse_dataset(data: bytes) -> TFIDataset:
    """
    Decodes the bytes of a dataset file.

    Raises
    ------
    FormatError
        On a bad magic, an unknown version, a wrong length or an invalid label, with the offending byte offset
    """
    if len(data) < len(DATASET_MAGIC) or data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError("not a dataset file, bad magic", 0)
    if len(data) < HEADER.size:
        raise FormatError("truncated header", len(data))
    _, version, count, height, width = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}", len(DATASET_MAGIC))
    if height == 0 or width == 0:
        raise FormatError(f"empty image size {height}x{width}", 16)
    dtype = record_dtype(height, width)
    expected = HEADER.size + count * dtype.itemsize
    if len(data) < expected:
        raise FormatError(f"truncated dataset, {count} records announced", len(data))
    if len(data) > expected:
        raise FormatError("trailing bytes after the last record", expected)
    records = np.frombuffer(data, dtype=dtype, count=count, offset=HEADER.size)
    bad = np.flatnonzero(records["label"] >= NUM_CLASSES)
    if bad.size:
        raise FormatError(f"class index {records['label'][bad[0]]} out of range", HEADER.size + bad[0] * dtype.itemsize)
    return TFIDataset.from_records(records.copy())


def load_dataset(path: Path | str) -> TFIDataset:
    dataset = parse_dataset(Path(path).read_bytes())
    logging.debug(f"Read {len(dataset)} records from {path}")
    return dataset


def split_indices(labels: np.ndarray, fractions: Sequence[float], seed: int = DEFAULT_SEED) -> list[np.ndarray]:
    """Sorted index arrays of a stratified partition of `labels`, see `split`"""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or fractions.size == 0 or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ParameterDomainError(f"fractions must be nonnegative and sum to 1, got {fractions.tolist()}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[np.array([], dtype=np.int64)] for _ in fractions]
    for class_index in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == class_index))
        bounds = np.round(np.cumsum(fractions) * members.size).astype(int)
        bounds[-1] = members.size
        for part, chunk in zip(parts, np.split(members, bounds[:-1])):
            part.append(chunk)
    return [np.sort(np.concatenate(part)) for part in parts]


def split(dataset: TFIDataset, fractions: Sequence[float], seed: int = DEFAULT_SEED) -> list[TFIDataset]:
    """
    Stratified partition of a dataset.

    Inside each class the records are permuted under `seed` and cut at the rounded cumulative fractions. Every partition keeps the record order of the input.

    Parameters
    ----------
    dataset : TFIDataset
        Records to split
    fractions : Sequence[float]
        Nonnegative, summing to 1
    seed : int, optional
        Seed of the per-class permutations

    Returns
    -------
    list[TFIDataset]
        One partition per fraction, pairwise disjoint

    Examples
    --------
    Splitting 120 records, 10 per class, with fractions (0.8, 0.2) gives 96 and 24 records, 8 and 2 per class.
    """
    return [dataset[indices] for indices in split_indices(dataset.labels, fractions, seed)]
