"""Signal preprocessing chain: resample, FIR bandpass, normalize, window.

The chain runs in a fixed order so the output contract holds for any input:
resample to the target rate, bandpass with a linear-phase windowed-sinc FIR,
scale each lead into [-1, 1] by its own max magnitude, then cut (or zero-pad)
a fixed-width window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentRangeError, ConfigError, ShapeError

DEGENERATE_LEAD_EPS = 1e-8


@dataclass
class PreprocessConfig:
    target_rate_hz: float = 500.0
    band_low_hz: float = 3.0
    band_high_hz: float = 45.0
    window_samples: int = 7680
    fir_taps: int = 513
    normalize_scope: str = "recording"  # or "window"

    def __post_init__(self):
        if not (0.0 < self.band_low_hz < self.band_high_hz < self.target_rate_hz / 2.0):
            raise ConfigError(
                f"band edges ({self.band_low_hz}, {self.band_high_hz}) Hz must satisfy "
                f"0 < low < high < Nyquist ({self.target_rate_hz / 2.0} Hz)"
            )
        if self.fir_taps % 2 != 1 or self.fir_taps < 3:
            raise ConfigError(f"fir_taps must be an odd integer >= 3, got {self.fir_taps}")
        if self.window_samples < 1:
            raise ConfigError("window_samples must be positive")
        if self.normalize_scope not in ("recording", "window"):
            raise ConfigError(f"normalize_scope must be 'recording' or 'window', got {self.normalize_scope!r}")


@dataclass
class ProcessedWindow:
    """Fixed-shape model input: [num_leads x window_samples] in [-1, 1].

    pad_start is the first zero-padded sample index (== window_samples when
    nothing was padded); source_offset is where the window starts in the
    filtered recording.
    """

    signal: np.ndarray
    pad_start: int
    source_offset: int

    @property
    def num_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def window_samples(self) -> int:
        return self.signal.shape[1]


def _as_lead_matrix(signal) -> np.ndarray:
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 1:
        sig = sig[None, :]
    if sig.ndim != 2:
        raise ShapeError(f"expected a [leads x samples] matrix, got shape {sig.shape}")
    return sig


def resample(signal, from_hz: float, to_hz: float) -> np.ndarray:
    """Linear interpolation onto the continuous-time grid of the new rate.

    Output length is round(num_samples * to_hz / from_hz). Equal rates return
    the input values untouched.
    """
    if from_hz <= 0 or to_hz <= 0:
        raise ArgumentRangeError(f"sampling rates must be positive, got {from_hz} -> {to_hz}")
    sig = _as_lead_matrix(signal)
    num_leads, n = sig.shape
    if n == 0:
        raise ShapeError("cannot resample an empty signal")
    if from_hz == to_hz:
        return sig.copy()
    m = int(round(n * to_hz / from_hz))
    # Position of output sample j on the input index grid: j * from/to.
    positions = np.arange(m, dtype=np.float64) * (from_hz / to_hz)
    src = np.arange(n, dtype=np.float64)
    out = np.empty((num_leads, m), dtype=np.float64)
    # Rounding up can push the last output position a fraction of a sample
    # past the input grid; extend the final segment linearly there.
    overhang = positions > n - 1
    for lead in range(num_leads):
        out[lead] = np.interp(positions, src, sig[lead])
        if overhang.any() and n >= 2:
            last_slope = sig[lead, n - 1] - sig[lead, n - 2]
            out[lead, overhang] = sig[lead, n - 1] + (positions[overhang] - (n - 1)) * last_slope
    return out


def _hamming_lowpass(cutoff_hz: float, fs_hz: float, num_taps: int) -> np.ndarray:
    """Windowed-sinc low-pass with unit DC gain and bitwise-symmetric taps."""
    m = num_taps - 1
    n = np.arange(num_taps, dtype=np.float64) - m / 2.0  # integer-valued, symmetric
    fc = cutoff_hz / fs_hz
    h = 2.0 * fc * np.sinc(2.0 * fc * n)
    # Hamming window written on centered indices so w[k] == w[m-k] exactly.
    w = 0.54 + 0.46 * np.cos(2.0 * np.pi * n / m)
    h = h * w
    return h / h.sum()


def design_bandpass(config: PreprocessConfig) -> np.ndarray:
    """Difference of two Hamming-windowed sinc low-passes (high minus low).

    Linear phase by construction: taps are exactly symmetric about the center.
    DC gain is zero because each low-pass is normalized to unit DC gain first.
    """
    fs = config.target_rate_hz
    return _hamming_lowpass(config.band_high_hz, fs, config.fir_taps) - _hamming_lowpass(
        config.band_low_hz, fs, config.fir_taps
    )


def filter_signal(signal, taps: np.ndarray) -> np.ndarray:
    """Per-lead convolution, zero-extended at the edges, group-delay compensated.

    Output sample j lines up with input sample j (the (taps-1)/2 delay of the
    symmetric kernel is removed); output length equals input length.
    """
    sig = _as_lead_matrix(signal)
    if sig.shape[1] < 1:
        raise ShapeError("signal must have at least one sample")
    taps = np.asarray(taps, dtype=np.float64)
    delay = (len(taps) - 1) // 2
    out = np.empty_like(sig)
    for lead in range(sig.shape[0]):
        full = np.convolve(sig[lead], taps, mode="full")
        out[lead] = full[delay : delay + sig.shape[1]]
    return out


def normalize(signal) -> np.ndarray:
    """Scale each lead by its own max magnitude into [-1, 1].

    Leads whose max magnitude is below 1e-8 come back as all zeros.
    """
    sig = _as_lead_matrix(signal)
    out = np.zeros_like(sig)
    for lead in range(sig.shape[0]):
        peak = np.max(np.abs(sig[lead])) if sig.shape[1] else 0.0
        if peak >= DEGENERATE_LEAD_EPS:
            out[lead] = sig[lead] / peak
    return out


def extract_window(signal, config: PreprocessConfig, offset_policy: str = "start", seed: int | None = None) -> ProcessedWindow:
    """Cut a window_samples-wide window, zero-padding the tail of short signals.

    offset_policy: "start", "center", or "random" (requires seed; offset drawn
    uniformly over the valid range, deterministic per seed).
    """
    sig = _as_lead_matrix(signal)
    num_leads, n = sig.shape
    if n < 1:
        raise ShapeError("signal must have at least one sample")
    w = config.window_samples
    out = np.zeros((num_leads, w), dtype=np.float64)
    if n >= w:
        if offset_policy == "start":
            offset = 0
        elif offset_policy == "center":
            offset = (n - w) // 2
        elif offset_policy == "random":
            if seed is None:
                raise ArgumentRangeError("offset_policy 'random' requires a seed")
            offset = int(np.random.default_rng(seed).integers(0, n - w + 1))
        else:
            raise ArgumentRangeError(f"unknown offset policy {offset_policy!r}")
        out[:] = sig[:, offset : offset + w]
        pad_start = w
    else:
        offset = 0
        out[:, :n] = sig
        pad_start = n
    return ProcessedWindow(signal=out, pad_start=pad_start, source_offset=offset)


def preprocess(signal, from_hz: float, config: PreprocessConfig, offset_policy: str = "start", seed: int | None = None) -> ProcessedWindow:
    """Full chain: resample -> bandpass -> normalize -> window.

    With normalize_scope == "window" the normalization runs on the extracted
    window instead of the whole filtered recording.
    """
    sig = resample(signal, from_hz, config.target_rate_hz)
    sig = filter_signal(sig, design_bandpass(config))
    if config.normalize_scope == "recording":
        sig = normalize(sig)
        window = extract_window(sig, config, offset_policy, seed)
    else:
        window = extract_window(sig, config, offset_policy, seed)
        normalized = normalize(window.signal)
        window = ProcessedWindow(normalized, window.pad_start, window.source_offset)
    return window
