# coding: utf-8
"""
Choi-Williams time-frequency analysis: turns an `IQSignal` into a fixed-size, normalized time-frequency image (TFI).

The raw distribution is evaluated on every sample and on a symmetric lag window, the lag axis is Fourier transformed into the frequency axis, and both axes are decimated to the output size by bin averaging. Rows are frequency, columns are time.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft
from scipy.signal import fftconvolve

from .definitions import DegenerateInputError, ParameterDomainError, SizeError
from .waveform import IQSignal, center_shift

REFERENCE_MAX_LENGTH = 64


@dataclass(frozen=True)
class CWDConfig:
    """
    Attributes
    ----------
    sigma : float
        Kernel scaling factor, trades cross-term suppression against resolution
    lag_window : int
        Odd number of lags tau, centered on 0
    mu_window : int
        Odd number of smoothing offsets mu, centered on 0
    out_height : int
        Frequency bins of the output
    out_width : int
        Time bins of the output
    """

    sigma: float = 1.0
    lag_window: int = 129
    mu_window: int = 65
    out_height: int = 128
    out_width: int = 128

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ParameterDomainError(f"sigma must be positive, got {self.sigma}")
        for name in ("lag_window", "mu_window"):
            value = getattr(self, name)
            if value < 3 or value % 2 == 0:
                raise ParameterDomainError(f"{name} must be odd and at least 3, got {value}")
        for name in ("out_height", "out_width"):
            value = getattr(self, name)
            if value < 8 or value & (value - 1):
                raise ParameterDomainError(f"{name} must be a power of two, at least 8, got {value}")

    @property
    def half_lag(self) -> int:
        return (self.lag_window - 1) // 2

    @property
    def half_mu(self) -> int:
        return (self.mu_window - 1) // 2

    @property
    def n_fft(self) -> int:
        """Length of the lag transform: the smallest multiple of out_height holding every lag"""
        return self.out_height * int(np.ceil(self.lag_window / self.out_height))


@dataclass
class TFI:
    """Time-frequency image. `values[f, t]`, frequency along rows."""

    values: np.ndarray
    fs: float
    normalized: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise SizeError(f"a TFI is a 2D image, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DegenerateInputError("TFI entries must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def to_pgm(self, path: Path | str) -> Path:
        return write_pgm(self.values, path)


def cw_kernel(config: CWDConfig) -> np.ndarray:
    """
    Choi-Williams smoothing kernel g(mu, tau) on the truncated windows, normalized to unit sum over mu for every tau.

    Returns
    -------
    np.ndarray
        Shape (mu_window, lag_window), indexed by [mu + half_mu, tau + half_lag]
    """
    mu = np.arange(-config.half_mu, config.half_mu + 1)[:, None]
    tau = np.arange(-config.half_lag, config.half_lag + 1)[None, :]
    kernel = np.zeros((mu.size, tau.size))
    nonzero = tau[0] != 0
    tau_sq = tau[:, nonzero] ** 2
    kernel[:, nonzero] = np.sqrt(config.sigma / (4 * np.pi * tau_sq)) * np.exp(
        -config.sigma * mu**2 / (4 * tau_sq)
    )
    kernel[config.half_mu, ~nonzero] = 1.0
    return kernel / kernel.sum(axis=0, keepdims=True)


def _bin_average(values: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = values.shape[axis]
    edges = (np.arange(n_out) * n_in) // n_out
    counts = np.diff(np.append(edges, n_in))
    sums = np.add.reduceat(values, edges, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = n_out
    return sums / counts.reshape(shape)


def _lag_transform(local_acf: np.ndarray, config: CWDConfig) -> np.ndarray:
    """(time, lag) local autocorrelation to the decimated (frequency, time) magnitude image"""
    n_fft = config.n_fft
    taus = np.arange(-config.half_lag, config.half_lag + 1)
    buffer = np.zeros((local_acf.shape[0], n_fft), dtype=complex)
    buffer[:, taus % n_fft] = local_acf
    spectrum = np.abs(fft.fftshift(fft.fft(buffer, axis=1), axes=1)).T
    spectrum = _bin_average(spectrum, config.out_height, axis=0)
    return _bin_average(spectrum, config.out_width, axis=1)


def cwd(signal: IQSignal, config: CWDConfig | None = None) -> TFI:
    """
    Discrete Choi-Williams distribution.

    K[t, tau] = sum_mu g(mu, tau) y[t + mu + tau] conj(y[t + mu - tau]), with samples outside the signal read as zero. The magnitude of the transform over tau gives the frequency axis.

    Parameters
    ----------
    signal : IQSignal
        At least `config.lag_window` samples
    config : CWDConfig, optional
        Defaults to the 128x128 configuration

    Returns
    -------
    TFI
        Raw, unnormalized image of shape (out_height, out_width)

    Raises
    ------
    SizeError
        If the signal is shorter than the lag window
    """
    if config is None:
        config = CWDConfig()
    y = signal.samples
    N = y.size
    if N < config.lag_window:
        raise SizeError(f"signal of {N} samples is shorter than the lag window {config.lag_window}")
    half_lag, half_mu = config.half_lag, config.half_mu
    pad = half_lag + half_mu
    padded = np.concatenate([np.zeros(pad, dtype=complex), y, np.zeros(pad, dtype=complex)])
    taus = np.arange(-half_lag, half_lag + 1)
    centers = np.arange(-half_mu, N + half_mu)[:, None] + pad
    products = padded[centers + taus] * np.conj(padded[centers - taus])
    kernel = cw_kernel(config)
    # smoothing along time, one kernel column per lag
    local_acf = fftconvolve(products, kernel[::-1], mode="valid", axes=0)
    return TFI(_lag_transform(local_acf, config), signal.fs)


def cwd_reference(signal: IQSignal, config: CWDConfig | None = None) -> TFI:
    """
    Literal nested-loop evaluation of `cwd`, for testing only.

    Raises
    ------
    SizeError
        If the signal is longer than 64 samples or shorter than the lag window
    """
    if config is None:
        config = CWDConfig()
    y = signal.samples
    N = y.size
    if N > REFERENCE_MAX_LENGTH:
        raise SizeError(f"the reference evaluation is limited to {REFERENCE_MAX_LENGTH} samples, got {N}")
    if N < config.lag_window:
        raise SizeError(f"signal of {N} samples is shorter than the lag window {config.lag_window}")
    kernel = cw_kernel(config)

    def sample(index: int) -> complex:
        return y[index] if 0 <= index < N else 0j

    local_acf = np.zeros((N, config.lag_window), dtype=complex)
    for t in range(N):
        for i_tau, tau in enumerate(range(-config.half_lag, config.half_lag + 1)):
            total = 0j
            for i_mu, mu in enumerate(range(-config.half_mu, config.half_mu + 1)):
                total += kernel[i_mu, i_tau] * sample(t + mu + tau) * np.conj(sample(t + mu - tau))
            local_acf[t, i_tau] = total
    return TFI(_lag_transform(local_acf, config), signal.fs)


def normalize_tfi(tfi: TFI) -> TFI:
    """
    Zero mean, unit variance over the whole image.

    Raises
    ------
    DegenerateInputError
        If the image is constant
    """
    values = np.asarray(tfi.values, dtype=np.float64)
    std = values.std()
    if not std > 0:
        raise DegenerateInputError("cannot normalize a TFI with zero variance")
    return TFI((values - values.mean()) / std, tfi.fs, normalized=True)


def tfi_pipeline(signal: IQSignal, f_c: float, config: CWDConfig | None = None) -> TFI:
    """Alignment shift, CWD and normalization, the preprocessing every network input goes through"""
    return normalize_tfi(cwd(center_shift(signal, f_c), config))


def frequency_row(f: float, fs: float, config: CWDConfig | None = None) -> float:
    """
    Fractional output row at which a tone of frequency `f` lands after `center_shift` put the nominal center at fs/2.

    The lag products y[t + tau] conj(y[t - tau]) rotate at twice the tone frequency, so the image spans fs/4 on either side of fs/2.
    """
    if config is None:
        config = CWDConfig()
    return config.out_height / 2 + 2 * (f - fs / 2) / fs * config.out_height


def write_pgm(values: np.ndarray, path: Path | str) -> Path:
    """
    Writes a 2D array as an 8-bit binary greyscale portable graymap, min-max scaled. A constant array becomes black.

    Returns
    -------
    Path
        Where the file was written
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise SizeError(f"a graymap needs a 2D array, got shape {values.shape}")
    low, high = values.min(), values.max()
    scaled = np.zeros(values.shape) if high == low else (values - low) / (high - low)
    pixels = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    height, width = pixels.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())
    return path
