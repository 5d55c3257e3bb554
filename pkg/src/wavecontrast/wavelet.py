"""Morlet continuous wavelet transform and scalogram construction.

Convention implemented here: psi(t) = exp(-t^2/2) * exp(-j*w0*t), and
T(a, b) = (1/sqrt(a)) * sum_t x[t] * psi((t - b)/a), evaluated at every
integer translation b with zero-padded edges. The wavelet is not
conjugated; only |T|^2 feeds the learning pipeline, which is unaffected
by that choice.

Two evaluation routes exist: a direct time-domain correlation (the
reference) and an FFT fast path that must agree with it to 1e-5 relative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

# Truncate wavelet support where |psi| < 1e-8: exp(-u^2/2) = 1e-8.
SUPPORT_CUTOFF = float(np.sqrt(-2.0 * np.log(1e-8)))


@dataclass(frozen=True)
class WaveletConfig:
    """Scale grid and mother-wavelet settings.

    When scale bounds are left unset they derive from the analysed window
    length: the grid spans pseudo-frequencies from 2 cycles per window up
    to half the Nyquist frequency (0.25 cycles/sample), log-spaced.
    """

    w0: float = 6.0
    n_scales: int = 32
    scale_min: Optional[float] = None
    scale_max: Optional[float] = None
    method: str = "fft"

    def __post_init__(self):
        if self.w0 <= 0:
            raise ValueError(f"w0 must be positive, got {self.w0}")
        if self.n_scales < 2:
            raise ValueError(f"n_scales must be >= 2, got {self.n_scales}")
        if self.scale_min is not None and self.scale_max is not None:
            if not 0 < self.scale_min < self.scale_max:
                raise ValueError(f"need 0 < scale_min < scale_max, got {self.scale_min}, {self.scale_max}")
        if self.method not in ("direct", "fft"):
            raise ValueError(f"method must be 'direct' or 'fft', got {self.method!r}")


def morlet(t, w0: float = 6.0) -> np.ndarray:
    """Mother wavelet exp(-t^2/2) * exp(-j*w0*t), vectorized over t."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-0.5 * t * t) * np.exp(-1j * w0 * t)


def pseudo_frequency(scale, w0: float = 6.0):
    """Pseudo-frequency in cycles/sample for a given scale: w0 / (2 pi a)."""
    return w0 / (2.0 * np.pi * np.asarray(scale, dtype=np.float64))


def scale_for_frequency(freq, w0: float = 6.0):
    """Inverse of :func:`pseudo_frequency`."""
    return w0 / (2.0 * np.pi * np.asarray(freq, dtype=np.float64))


def scale_grid(config: WaveletConfig, window: int) -> np.ndarray:
    """Log-spaced scales, ascending, resolved against a window length."""
    if window < 2:
        raise ValueError(f"window must be >= 2 samples, got {window}")
    smin = config.scale_min
    smax = config.scale_max
    if smin is None:
        smin = float(scale_for_frequency(0.25, config.w0))
    if smax is None:
        smax = float(scale_for_frequency(2.0 / window, config.w0))
    if not 0 < smin < smax:
        raise ValueError(f"degenerate scale range [{smin}, {smax}] for window {window}")
    return np.geomspace(smin, smax, config.n_scales)


def _support_halfwidth(scale: float) -> int:
    return int(np.ceil(SUPPORT_CUTOFF * scale))


def _kernel(scale: float, w0: float) -> np.ndarray:
    half = _support_halfwidth(scale)
    m = np.arange(-half, half + 1, dtype=np.float64)
    return morlet(m / scale, w0) / np.sqrt(scale)


def cwt_direct(signal: np.ndarray, scales: np.ndarray, w0: float = 6.0) -> np.ndarray:
    """Time-domain CWT, one correlation per scale. Reference route."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"signal must be a non-empty 1D array, got shape {x.shape}")
    out = np.empty((len(scales), x.size), dtype=np.complex128)
    for i, a in enumerate(scales):
        k = _kernel(float(a), w0)
        half = (len(k) - 1) // 2
        xp = np.pad(x, (half, half))
        # Real input: correlate real and imaginary kernel parts separately
        # (np.correlate conjugates a complex second argument, which is not
        # the convention here).
        re = np.correlate(xp, k.real, mode="valid")
        im = np.correlate(xp, k.imag, mode="valid")
        out[i] = re + 1j * im
    return out


def cwt_fft(signal: np.ndarray, scales: np.ndarray, w0: float = 6.0) -> np.ndarray:
    """FFT fast path; linear correlation via padded circular convolution."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"signal must be a non-empty 1D array, got shape {x.shape}")
    t = x.size
    halves = [_support_halfwidth(float(a)) for a in scales]
    n = t + 2 * max(halves)
    fx = np.fft.fft(x, n)
    out = np.empty((len(scales), t), dtype=np.complex128)
    for i, (a, half) in enumerate(zip(scales, halves)):
        # Correlation with kernel k equals convolution with the reversed
        # (unconjugated) kernel; slice the full-convolution result so b=0
        # aligns with the kernel centre.
        g = _kernel(float(a), w0)[::-1]
        fg = np.fft.fft(g, n)
        full = np.fft.ifft(fx * fg)
        out[i] = full[half : half + t]
    return out


def cwt(signal: np.ndarray, config: WaveletConfig, scales: Optional[np.ndarray] = None) -> np.ndarray:
    """CWT over the configured scale grid; returns (n_scales, time) complex."""
    x = np.asarray(signal, dtype=np.float64)
    if scales is None:
        scales = scale_grid(config, x.size)
    if config.method == "direct":
        return cwt_direct(x, scales, config.w0)
    return cwt_fft(x, scales, config.w0)


def scalogram(
    segment: np.ndarray,
    config: WaveletConfig,
    target_shape: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """Squared CWT magnitudes for a (window, channels) segment.

    Returns (h, w', channels) with h = n_scales and the time axis
    average-pooled down to w' (trailing remainder dropped). With no target
    shape the full time extent is kept.
    """
    seg = np.asarray(segment, dtype=np.float64)
    if seg.ndim == 1:
        seg = seg[:, None]
    if seg.ndim != 2:
        raise ValueError(f"segment must be (window, channels), got shape {seg.shape}")
    t, c = seg.shape
    if target_shape is not None:
        h, w = target_shape
        if h != config.n_scales:
            raise ValueError(f"target height {h} != n_scales {config.n_scales}")
        if w > t:
            raise ValueError(f"target width {w} exceeds segment length {t}")
        if w < 1:
            raise ValueError("target width must be >= 1")
    scales = scale_grid(config, t)
    planes = []
    for ch in range(c):
        coeff = cwt(seg[:, ch], config, scales)
        power = (coeff.real * coeff.real + coeff.imag * coeff.imag)
        if target_shape is not None:
            w = target_shape[1]
            pool = t // w
            power = power[:, : w * pool].reshape(config.n_scales, w, pool).mean(axis=2)
        planes.append(power)
    return np.stack(planes, axis=-1)
