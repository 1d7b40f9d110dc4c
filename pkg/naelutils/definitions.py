# coding: utf-8
"""
This file contains commonly used definitions of paths and compute options, gotten from the file `$HOME/.naelutils.ini` if it exists, otherwise guessed.

It also contains the package-wide constants (class names, default SNR scenarios), the error hierarchy used by every module and mapped to exit codes by the command line, and a few functions that are useful all over.
"""
import os
import logging
import hashlib
from pathlib import Path
from typing import Callable, ClassVar, Dict, Iterable, Optional
from dataclasses import dataclass, field
from multiprocessing import Pool
import time
import configparser
from importlib import resources as impresources

import numpy as np
from tqdm import tqdm


if "DATADIR" not in globals():
    # Try to find a .naelutils.ini
    config = configparser.ConfigParser()
    path_default_config = impresources.files("naelutils").joinpath("config.ini")
    path_override_config = Path.home().joinpath(".naelutils.ini")
    config.read([str(path_default_config), path_override_config])

    if path_override_config.is_file():
        logging.debug(f"Found config override file at {path_override_config}")
    else:
        logging.debug(f"No config override found at {path_override_config}, guessing everything")

    # For what's not found, guesses and logs the guesses
    DATADIR = config.get("PATHS", "DATADIR")
    RESULTS = config.get("PATHS", "RESULTS")
    N_WORKERS = config.get("COMPUTE", "N_WORKERS")
    DTYPE = np.dtype(config.get("COMPUTE", "DTYPE"))

    if DATADIR == "guess":
        DATADIR = Path.cwd().joinpath("data")
        logging.debug(f"Guessed DATADIR : {DATADIR}")
    DATADIR = Path(DATADIR)
    if RESULTS == "guess":
        RESULTS = Path.cwd().joinpath("results")
        logging.debug(f"Guessed RESULTS : {RESULTS}")
    RESULTS = Path(RESULTS)
    if N_WORKERS == "guess":
        if "SLURM_NTASKS" not in os.environ and "SLURM_CPUS_ON_NODE" not in os.environ:
            N_WORKERS = os.cpu_count() or 1
        else:
            guess_1 = int(os.environ.get("SLURM_NTASKS", 1))
            guess_2 = int(os.environ.get("SLURM_CPUS_ON_NODE", 1))
            N_WORKERS = max(guess_1, guess_2)
        logging.debug(f"Guessed N_WORKERS : {N_WORKERS}")
    N_WORKERS = int(N_WORKERS)

    DEFAULT_SEED = int(os.environ.get("NAEL_SEED", config.get("NAEL", "SEED")))
    DEFAULT_FS = config.getfloat("NAEL", "FS")
    DEFAULT_N_SAMPLES = config.getint("NAEL", "N_SAMPLES")

    CLASS_NAMES = (
        "LFM",
        "Costas",
        "Barker",
        "Frank",
        "P1",
        "P2",
        "P3",
        "P4",
        "T1",
        "T2",
        "T3",
        "T4",
    )
    NUM_CLASSES = len(CLASS_NAMES)

    VERDICTS = ("reliable", "unreliable")

    SCENARIO_SNRS = (-4.0, -15.0, -17.0)
    SNR_GRID = (-15.0, -10.0, -5.0, 0.0, 5.0)

    DATASET_MAGIC = b"NAELDS1\x00"
    CHECKPOINT_MAGIC = b"NAELCK1\x00"
    FORMAT_VERSION = 1


class NaelError(Exception):
    """Base of every error raised on purpose by this package. `exit_code` is what the command line returns."""

    exit_code: int = 1


class ParameterDomainError(NaelError, ValueError):
    """A parameter lies outside of its allowed domain"""

    exit_code = 2


class WrongSchemeError(ParameterDomainError):
    """An operation was asked for a modulation scheme it does not apply to"""


class ShapeError(NaelError, ValueError):
    """Tensor or array shapes do not conform"""

    exit_code = 3


class SizeError(ShapeError):
    """An input is too short or too long for the operation"""


class LabelError(NaelError, ValueError):
    """A class label is out of range"""

    exit_code = 3


class FormatError(NaelError, ValueError):
    """
    A binary file is malformed.

    Parameters
    ----------
    message : str
        What went wrong
    offset : int
        Byte offset in the file where the problem was detected
    """

    exit_code = 3

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CompatibilityError(NaelError, ValueError):
    """A checkpoint does not match the network it is loaded into"""

    exit_code = 3


class ContractError(NaelError, ValueError):
    """An input violates the contract of the callee, for example an unnormalized TFI"""

    exit_code = 3


class DependencyError(NaelError, RuntimeError):
    """
    A prerequisite stage is missing.

    Parameters
    ----------
    stage : str
        Name of the missing stage, e.g. "prn"
    """

    exit_code = 4

    def __init__(self, stage: str, message: str | None = None) -> None:
        if message is None:
            message = f"missing prerequisite stage: {stage}"
        super().__init__(message)
        self.stage = stage


class DegenerateInputError(NaelError, ValueError):
    """An input has no variance where some is required"""

    exit_code = 5


class DegenerateBatchError(NaelError, ValueError):
    """Batch statistics cannot be computed on this batch"""

    exit_code = 5


class DegenerateLabelError(NaelError, ValueError):
    """A classification dataset holds a single class"""

    exit_code = 5


class GraphStateError(NaelError, RuntimeError):
    """Gradients were requested without a recorded forward pass"""

    exit_code = 5


class TrainingError(NaelError, RuntimeError):
    """
    Training diverged.

    Parameters
    ----------
    step : int
        Index of the weight update at which the loss stopped being finite
    """

    exit_code = 5

    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} at step {step}")
        self.step = step


class UndefinedSNRError(NaelError, ValueError):
    """The signal-to-noise ratio cannot be computed from these powers"""

    exit_code = 5


class TimerError(Exception):
    """A custom exception used to report errors in use of Timer class"""


@dataclass
class Timer:
    """
    Nice context manager timer.

    Raises
    ------
    TimerError

    Examples
    --------
    >>> with Timer():
    ...    do_something_long()
    "Elapsed time: 5.3000 seconds"
    """

    timers: ClassVar[Dict[str, float]] = {}
    name: Optional[str] = None
    text: str = "Elapsed time: {:0.4f} seconds"
    logger: Optional[Callable[[str], None]] = logging.info
    _start_time: Optional[float] = field(default=None, init=False, repr=False)
    elapsed: float = field(default=0.0, init=False, repr=False)

    def __post_init__(self) -> None:
        """Add timer to dict of timers after initialization"""
        if self.name is not None:
            self.timers.setdefault(self.name, 0)

    def start(self) -> None:
        """Start a new timer"""
        if self._start_time is not None:
            raise TimerError("Timer is running. Use .stop() to stop it")

        self._start_time = time.perf_counter()

    def stop(self) -> float:
        """Stop the timer, and report the elapsed time"""
        if self._start_time is None:
            raise TimerError("Timer is not running. Use .start() to start it")

        elapsed_time = time.perf_counter() - self._start_time
        self._start_time = None
        self.elapsed = elapsed_time

        if self.logger:
            self.logger(self.text.format(elapsed_time))
        if self.name:
            self.timers[self.name] += elapsed_time

        return elapsed_time

    def __enter__(self):
        """Start a new timer as a context manager"""
        self.start()
        return self

    def __exit__(self, *exc_info):
        """Stop the context manager timer"""
        self.stop()


def map_maybe_parallel(
    iterator: Iterable,
    func: Callable,
    len_: int,
    processes: int = N_WORKERS,
    chunksize: int | None = None,
    progress: bool = True,
    desc: str | None = None,
) -> list:
    """
    Maps a function on the components of an Iterable. Can be parallel if processes is greater than one, in which case a `multiprocessing.Pool` is created. Results always come back in input order, so the number of processes never changes the output.

    Parameters
    ----------
    iterator : Iterable
        Data
    func : Callable
        Function to apply to each element of `iterator`. Must be picklable when `processes > 1`.
    len_ : int
        len of the `iterator`, so we can display a progress bar.
    processes : int, optional
        Number of parallel processes, will not create a `Pool` if 1, by default N_WORKERS
    chunksize : int, optional
        How many elements to send to a worker at once, by default `len_ // processes` capped at 200
    progress : bool, optional
        Show a progress bar using `tqdm`, by default True
    desc : str, optional
        Label of the progress bar

    Returns
    -------
    list
        result of the map coerced into a list.
    """
    processes = max(1, min(processes, len_))
    if processes == 1:
        mapped = map(func, iterator)
        if progress:
            mapped = tqdm(mapped, total=len_, desc=desc)
        return list(mapped)
    if chunksize is None:
        chunksize = max(1, min(int(len_ // processes), 200))
    with Pool(processes=processes) as pool:
        mapped = pool.imap(func, iterator, chunksize=chunksize)
        if progress:
            mapped = tqdm(mapped, total=len_, desc=desc)
        return list(mapped)


def file_digest(path: Path | str) -> str:
    """SHA-256 hex digest of a file"""
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()
