# coding: utf-8
"""
Synthesis of the twelve LPI radar modulation schemes as complex baseband sequences, plus the AWGN channel and the center-frequency alignment shift applied before time-frequency analysis.

FM schemes (LFM, Costas) keep the phase constant and move the frequency, PM schemes (Barker, Frank, P1-P4, T1-T4) keep the carrier at `f_c` and step the phase.
"""
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .definitions import (
    CLASS_NAMES,
    DEFAULT_FS,
    ParameterDomainError,
    WrongSchemeError,
)

TWO_PI = 2 * np.pi

COSTAS_SEQUENCES = {
    4: (2, 4, 3, 1),
    6: (3, 2, 6, 4, 5, 1),
}

BARKER_CODES = {
    7: (1, 1, 1, -1, -1, 1, -1),
    11: (1, 1, 1, -1, -1, -1, 1, -1, -1, 1, -1),
    13: (1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1),
}


class ModulationScheme(IntEnum):
    """The twelve recognized schemes. The integer value is the class index."""

    LFM = 0
    COSTAS = 1
    BARKER = 2
    FRANK = 3
    P1 = 4
    P2 = 5
    P3 = 6
    P4 = 7
    T1 = 8
    T2 = 9
    T3 = 10
    T4 = 11

    @property
    def tag(self) -> str:
        return CLASS_NAMES[self.value]

    @classmethod
    def from_tag(cls, text: str) -> "ModulationScheme":
        """
        Parses a class name, case-insensitive. "BPSK" is accepted for Barker.

        Raises
        ------
        ParameterDomainError
            If `text` names no scheme
        """
        lookup = {name.lower(): i for i, name in enumerate(CLASS_NAMES)}
        lookup["bpsk"] = cls.BARKER.value
        lookup["barker(bpsk)"] = cls.BARKER.value
        try:
            return cls(lookup[text.strip().lower()])
        except KeyError:
            raise ParameterDomainError(f"unknown modulation scheme {text!r}") from None

    @property
    def is_fm(self) -> bool:
        return self in (ModulationScheme.LFM, ModulationScheme.COSTAS)

    @property
    def is_polytime(self) -> bool:
        return self in POLYTIME_SCHEMES

    @property
    def has_phase_code(self) -> bool:
        return self in PHASE_CODE_SCHEMES


POLYTIME_SCHEMES = (
    ModulationScheme.T1,
    ModulationScheme.T2,
    ModulationScheme.T3,
    ModulationScheme.T4,
)
PHASE_CODE_SCHEMES = (
    ModulationScheme.BARKER,
    ModulationScheme.FRANK,
    ModulationScheme.P1,
    ModulationScheme.P2,
    ModulationScheme.P3,
    ModulationScheme.P4,
)


@dataclass(frozen=True)
class WaveformParams:
    """
    Parameters of one emitted waveform. Only the fields relevant to a scheme are read, the others stay None.

    Attributes
    ----------
    A : float
        Amplitude
    phi0 : float
        Initial phase in radians
    f_c : float
        Carrier frequency in Hz (LFM start frequency, PM carrier)
    B : float
        LFM sweep bandwidth in Hz
    f_min, f_hop : float
        Costas fundamental frequency and frequency spacing in Hz
    L_hs : int
        Costas hop sequence length
    L_B : int
        Barker code length
    N_sc : int
        Samples per subcode
    M : int
        Frank, P1 and P2 order
    N_c : int
        P3 and P4 code length
    k_seg : int
        T1 and T2 segment count
    dF : float
        T3 and T4 modulation bandwidth in Hz
    n_states : int
        Polytime phase state count
    """

    A: float = 1.0
    phi0: float = 0.0
    f_c: float | None = None
    B: float | None = None
    f_min: float | None = None
    L_hs: int | None = None
    f_hop: float | None = None
    L_B: int | None = None
    N_sc: int | None = None
    M: int | None = None
    N_c: int | None = None
    k_seg: int | None = None
    dF: float | None = None
    n_states: int = 2

    def _require(self, scheme: ModulationScheme, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise ParameterDomainError(f"{scheme.tag} needs parameter {name}")

    def validate(self, scheme: ModulationScheme, fs: float = DEFAULT_FS) -> "WaveformParams":
        """
        Checks the parameters consumed by `scheme`.

        Raises
        ------
        ParameterDomainError
            On the first violated constraint

        Returns
        -------
        WaveformParams
            self, for chaining
        """
        scheme = ModulationScheme(scheme)
        if not self.A > 0:
            raise ParameterDomainError(f"amplitude must be positive, got {self.A}")
        if not np.isfinite(self.phi0):
            raise ParameterDomainError("initial phase must be finite")
        if scheme is ModulationScheme.COSTAS:
            self._require(scheme, "f_min", "f_hop", "L_hs")
            if self.L_hs not in COSTAS_SEQUENCES:
                raise ParameterDomainError(f"L_hs must be one of {sorted(COSTAS_SEQUENCES)}, got {self.L_hs}")
            if not (self.f_min > 0 and self.f_hop > 0):
                raise ParameterDomainError("Costas frequencies must be positive")
            if self.f_min + (self.L_hs - 1) * self.f_hop >= fs / 2:
                raise ParameterDomainError("highest Costas hop reaches fs/2")
            return self
        self._require(scheme, "f_c")
        if not 0 < self.f_c < fs / 2:
            raise ParameterDomainError(f"f_c must lie in (0, fs/2), got {self.f_c}")
        match scheme:
            case ModulationScheme.LFM:
                self._require(scheme, "B")
                if self.B < 0:
                    raise ParameterDomainError(f"B must be nonnegative, got {self.B}")
            case ModulationScheme.BARKER:
                self._require(scheme, "L_B", "N_sc")
                if self.L_B not in BARKER_CODES:
                    raise ParameterDomainError(f"L_B must be one of {sorted(BARKER_CODES)}, got {self.L_B}")
            case ModulationScheme.FRANK | ModulationScheme.P1 | ModulationScheme.P2:
                self._require(scheme, "M", "N_sc")
                if self.M < 2:
                    raise ParameterDomainError(f"M must be at least 2, got {self.M}")
            case ModulationScheme.P3 | ModulationScheme.P4:
                self._require(scheme, "N_c", "N_sc")
                if self.N_c < 1:
                    raise ParameterDomainError(f"N_c must be at least 1, got {self.N_c}")
            case ModulationScheme.T1 | ModulationScheme.T2:
                self._require(scheme, "k_seg")
                if self.k_seg < 1:
                    raise ParameterDomainError(f"k_seg must be at least 1, got {self.k_seg}")
            case ModulationScheme.T3 | ModulationScheme.T4:
                self._require(scheme, "dF")
                if not self.dF > 0:
                    raise ParameterDomainError(f"dF must be positive, got {self.dF}")
        if scheme.has_phase_code and self.N_sc < 1:
            raise ParameterDomainError(f"N_sc must be at least 1, got {self.N_sc}")
        if scheme.is_polytime and self.n_states < 2:
            raise ParameterDomainError(f"n_states must be at least 2, got {self.n_states}")
        return self

    def to_block(self, scheme: ModulationScheme) -> np.ndarray:
        """
        Packs the scheme-relevant parameters in a fixed 8-slot float32 vector. Unused slots are zero.

        Slot layout:

        ========== ======= ======= ========
        scheme     slot 0  slot 1  slot 2
        ========== ======= ======= ========
        LFM        f_c     B
        Costas     f_min   f_hop   L_hs
        Barker     f_c     L_B     N_sc
        Frank..P2  f_c     M       N_sc
        P3, P4     f_c     N_c     N_sc
        T1, T2     f_c     k_seg   n_states
        T3, T4     f_c     dF      n_states
        ========== ======= ======= ========
        """
        names = _BLOCK_LAYOUT[ModulationScheme(scheme)]
        block = np.zeros(8, dtype=np.float32)
        for i, name in enumerate(names):
            block[i] = getattr(self, name)
        return block

    @classmethod
    def from_block(cls, scheme: ModulationScheme, block: Sequence[float]) -> "WaveformParams":
        names = _BLOCK_LAYOUT[ModulationScheme(scheme)]
        integer_fields = {"L_hs", "L_B", "N_sc", "M", "N_c", "k_seg", "n_states"}
        kwargs = {}
        for i, name in enumerate(names):
            value = float(block[i])
            kwargs[name] = int(round(value)) if name in integer_fields else value
        return cls(**kwargs)


_BLOCK_LAYOUT = {
    ModulationScheme.LFM: ("f_c", "B"),
    ModulationScheme.COSTAS: ("f_min", "f_hop", "L_hs"),
    ModulationScheme.BARKER: ("f_c", "L_B", "N_sc"),
    ModulationScheme.FRANK: ("f_c", "M", "N_sc"),
    ModulationScheme.P1: ("f_c", "M", "N_sc"),
    ModulationScheme.P2: ("f_c", "M", "N_sc"),
    ModulationScheme.P3: ("f_c", "N_c", "N_sc"),
    ModulationScheme.P4: ("f_c", "N_c", "N_sc"),
    ModulationScheme.T1: ("f_c", "k_seg", "n_states"),
    ModulationScheme.T2: ("f_c", "k_seg", "n_states"),
    ModulationScheme.T3: ("f_c", "dF", "n_states"),
    ModulationScheme.T4: ("f_c", "dF", "n_states"),
}


@dataclass
class IQSignal:
    """Complex baseband samples and their sampling rate"""

    samples: np.ndarray
    fs: float = DEFAULT_FS

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ParameterDomainError("an IQ signal needs a non-empty 1D sample sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterDomainError("IQ samples must be finite")
        if not self.fs > 0:
            raise ParameterDomainError(f"sampling rate must be positive, got {self.fs}")

    def __len__(self) -> int:
        return self.samples.size

    def power(self) -> float:
        """Mean of |samples|^2"""
        return float(np.mean(np.abs(self.samples) ** 2))


def costas_sequence(L: int) -> np.ndarray:
    """
    Welch Costas hop sequence.

    Parameters
    ----------
    L : int
        Hop count, 4 or 6

    Returns
    -------
    np.ndarray
        Permutation of 1..L

    Raises
    ------
    ParameterDomainError
        If L is not supported
    """
    try:
        return np.asarray(COSTAS_SEQUENCES[L], dtype=int)
    except KeyError:
        raise ParameterDomainError(f"unsupported Costas length {L}, choose from {sorted(COSTAS_SEQUENCES)}") from None


def is_costas(sequence: Sequence[int]) -> bool:
    """Brute-force distinct-differences test: every row of the difference triangle has distinct entries"""
    sequence = np.asarray(sequence)
    for lag in range(1, len(sequence)):
        differences = sequence[lag:] - sequence[:-lag]
        if np.unique(differences).size != differences.size:
            return False
    return True


def barker_sequence(L: int) -> np.ndarray:
    """
    Barker chips as +1 / -1.

    Raises
    ------
    ParameterDomainError
        If L is not 7, 11 or 13
    """
    try:
        return np.asarray(BARKER_CODES[L], dtype=int)
    except KeyError:
        raise ParameterDomainError(f"unsupported Barker length {L}, choose from {sorted(BARKER_CODES)}") from None


def aperiodic_autocorrelation(code: Sequence[complex]) -> np.ndarray:
    """Aperiodic autocorrelation at lags 0..len(code)-1"""
    code = np.asarray(code)
    return np.correlate(code, code, mode="full")[code.size - 1 :]


def phase_code(scheme: ModulationScheme, params: WaveformParams) -> np.ndarray:
    """
    Per-subcode phases of a phase-coded scheme, reduced to (-2pi, 2pi).

    Parameters
    ----------
    scheme : ModulationScheme
        Barker, Frank or P1 to P4
    params : WaveformParams
        Uses L_B, M or N_c

    Returns
    -------
    np.ndarray
        Length L_B, M^2 or N_c

    Raises
    ------
    WrongSchemeError
        For FM and polytime schemes

    Examples
    --------
    >>> phase_code(ModulationScheme.FRANK, WaveformParams(M=2))
    array([0.        , 0.        , 0.        , 3.14159265])
    """
    scheme = ModulationScheme(scheme)
    if not scheme.has_phase_code:
        raise WrongSchemeError(f"{scheme.tag} has no per-subcode phase code")
    match scheme:
        case ModulationScheme.BARKER:
            if params.L_B is None:
                raise ParameterDomainError("Barker needs parameter L_B")
            phases = np.where(barker_sequence(params.L_B) > 0, 0.0, np.pi)
        case ModulationScheme.FRANK | ModulationScheme.P1 | ModulationScheme.P2:
            if params.M is None or params.M < 2:
                raise ParameterDomainError(f"{scheme.tag} needs M >= 2")
            M = params.M
            outer, inner = np.meshgrid(np.arange(1, M + 1), np.arange(1, M + 1), indexing="ij")
            if scheme is ModulationScheme.FRANK:
                i, j = outer, inner
                phases = TWO_PI * (i - 1) * (j - 1) / M
            elif scheme is ModulationScheme.P1:
                # groups run along j
                j, i = outer, inner
                phases = -(np.pi / M) * (M - (2 * j - 1)) * ((j - 1) * M + (i - 1))
            else:
                i, j = outer, inner
                phases = -(np.pi / (2 * M)) * (2 * i - 1 - M) * (2 * j - 1 - M)
            phases = phases.ravel()
        case ModulationScheme.P3 | ModulationScheme.P4:
            if params.N_c is None or params.N_c < 1:
                raise ParameterDomainError(f"{scheme.tag} needs N_c >= 1")
            i = np.arange(1, params.N_c + 1)
            phases = np.pi * (i - 1) ** 2 / params.N_c
            if scheme is ModulationScheme.P4:
                phases = phases - np.pi * (i - 1)
    return np.fmod(phases.astype(float), TWO_PI)


def polytime_phase(
    scheme: ModulationScheme,
    params: WaveformParams,
    t: float | np.ndarray,
    T: float,
) -> float | np.ndarray:
    """
    Quantized phase of a polytime code at time(s) `t` within a code of duration `T`.

    Parameters
    ----------
    scheme : ModulationScheme
        T1 to T4
    params : WaveformParams
        Uses k_seg (T1, T2), dF (T3, T4) and n_states
    t : float | np.ndarray
        Time in seconds, 0 <= t < T
    T : float
        Code duration in seconds

    Returns
    -------
    float | np.ndarray
        Phase in [0, 2pi), same shape as `t`

    Raises
    ------
    WrongSchemeError
        For non-polytime schemes
    ParameterDomainError
        If some `t` lies outside [0, T)
    """
    scheme = ModulationScheme(scheme)
    if not scheme.is_polytime:
        raise WrongSchemeError(f"{scheme.tag} is not a polytime code")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not T > 0 or np.any(t < 0) or np.any(t >= T):
        raise ParameterDomainError("polytime phase needs 0 <= t < T")
    n = params.n_states
    match scheme:
        case ModulationScheme.T1 | ModulationScheme.T2:
            k = params.k_seg
            j = np.floor(k * t / T)
            if scheme is ModulationScheme.T1:
                argument = (k * t - j * T) * j * n / T
            else:
                argument = (k * t - j * T) * (2 * j - k + 1) * (n / 2) / T
        case ModulationScheme.T3:
            argument = n * params.dF * t**2 / (2 * T)
        case ModulationScheme.T4:
            argument = n * params.dF * t**2 / (2 * T) - n * params.dF * t / 2
    # reduce the integer state first so the result never rounds up to 2pi
    state = np.mod(np.floor(argument), n)
    phases = TWO_PI / n * state
    return float(phases[0]) if scalar else phases


def nominal_center(scheme: ModulationScheme, params: WaveformParams) -> float:
    """
    Center of the occupied band, the frequency that `center_shift` moves to fs/2.

    LFM sweeps f_c to f_c + B, Costas hops between f_min and f_min + (L_hs - 1) f_hop, T3 sweeps f_c to f_c + dF, all other schemes sit on f_c.
    """
    scheme = ModulationScheme(scheme)
    match scheme:
        case ModulationScheme.LFM:
            return params.f_c + params.B / 2
        case ModulationScheme.COSTAS:
            return params.f_min + (params.L_hs - 1) * params.f_hop / 2
        case ModulationScheme.T3:
            return params.f_c + params.dF / 2
        case _:
            return params.f_c


def _accumulate_phase(frequency: np.ndarray, fs: float) -> np.ndarray:
    increments = TWO_PI * frequency[:-1] / fs
    return np.concatenate([[0.0], np.cumsum(increments)])


def synthesize(
    scheme: ModulationScheme,
    params: WaveformParams,
    N: int,
    fs: float = DEFAULT_FS,
    rng_seed: int | None = None,
) -> IQSignal:
    """
    Noiseless complex envelope of one waveform.

    Parameters
    ----------
    scheme : ModulationScheme
        Which of the twelve schemes
    params : WaveformParams
        Validated against `scheme` and `fs`
    N : int
        Number of samples
    fs : float, optional
        Sampling rate in Hz
    rng_seed : int | None, optional
        Only used when `params.phi0` is NaN, to draw a uniform initial phase

    Returns
    -------
    IQSignal
        Constant-modulus signal of length N

    Raises
    ------
    ParameterDomainError
        On invalid parameters or N < 1
    """
    scheme = ModulationScheme(scheme)
    if N < 1:
        raise ParameterDomainError(f"N must be positive, got {N}")
    if np.isnan(params.phi0):
        params = replace(params, phi0=float(np.random.default_rng(rng_seed).uniform(0, TWO_PI)))
    params.validate(scheme, fs)
    n = np.arange(N)
    match scheme:
        case ModulationScheme.LFM:
            frequency = params.f_c + params.B * n / N
            phase = _accumulate_phase(frequency, fs)
        case ModulationScheme.COSTAS:
            hops = costas_sequence(params.L_hs)
            hop_index = n * params.L_hs // N
            frequency = params.f_min + (hops[hop_index] - 1) * params.f_hop
            phase = _accumulate_phase(frequency, fs)
        case _ if scheme.has_phase_code:
            code = phase_code(scheme, params)
            carrier = TWO_PI * params.f_c / fs * n
            phase = carrier + code[(n // params.N_sc) % code.size]
        case _:
            carrier = TWO_PI * params.f_c / fs * n
            phase = carrier + polytime_phase(scheme, params, n / fs, N / fs)
    samples = params.A * np.exp(1j * (phase + params.phi0))
    return IQSignal(samples, fs)


def add_awgn(
    signal: IQSignal,
    snr_db: float,
    rng_seed: int | None = None,
    amplitude: float = 1.0,
) -> IQSignal:
    """
    Adds circular complex white Gaussian noise of per-sample variance amplitude^2 / 10^(snr_db/10).

    Parameters
    ----------
    signal : IQSignal
        Clean signal
    snr_db : float
        Target SNR in dB, `np.inf` adds nothing
    rng_seed : int | None, optional
        Seed of the noise generator
    amplitude : float, optional
        Signal amplitude A used in the SNR definition, by default 1

    Returns
    -------
    IQSignal
        Noisy copy
    """
    if np.isposinf(snr_db):
        return IQSignal(signal.samples.copy(), signal.fs)
    if np.isnan(snr_db) or np.isneginf(snr_db):
        raise ParameterDomainError(f"SNR must be finite or +inf, got {snr_db}")
    variance = amplitude**2 / 10 ** (snr_db / 10)
    rng = np.random.default_rng(rng_seed)
    noise = rng.standard_normal(len(signal)) + 1j * rng.standard_normal(len(signal))
    return IQSignal(signal.samples + np.sqrt(variance / 2) * noise, signal.fs)


def center_shift(signal: IQSignal, f_c: float) -> IQSignal:
    """Moves the nominal center `f_c` to fs/2, the middle row of the TFI frequency axis"""
    offset = signal.fs / 2 - f_c
    if offset == 0:
        return IQSignal(signal.samples.copy(), signal.fs)
    n = np.arange(len(signal))
    return IQSignal(signal.samples * np.exp(1j * TWO_PI * offset * n / signal.fs), signal.fs)
