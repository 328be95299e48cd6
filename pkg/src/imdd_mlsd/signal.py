"""Sampled complex-baseband signal container and the arithmetic shared by
the channel, kernel, and receiver code: convolution, frequency-domain
filtering, shifted inner products, and seeded noise injection.

All waveforms are uniformly sampled; absolute timing is carried by an
integer ``start_index`` so that shifted/filtered signals stay aligned
without fractional-delay bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve as _sp_convolve


class ConfigurationError(ValueError):
    """Raised when operands or parameters violate a precondition."""


def _next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


@dataclass(frozen=True)
class GridSpec:
    """Sampling grid tied to the symbol clock.

    Attributes
    ----------
    samples_per_symbol : int
        Oversampling factor R. Symbol k sits at sample index k*R.
    symbol_period : float
        Symbol period T in seconds. The sample period is exactly T/R.
    """

    samples_per_symbol: int
    symbol_period: float

    def __post_init__(self):
        if self.samples_per_symbol < 1:
            raise ConfigurationError("samples_per_symbol must be >= 1")
        if not self.symbol_period > 0:
            raise ConfigurationError("symbol_period must be > 0")

    @property
    def sample_period(self) -> float:
        return self.symbol_period / self.samples_per_symbol


@dataclass(frozen=True)
class SampledSignal:
    """Uniformly sampled waveform with explicit grid placement.

    Attributes
    ----------
    samples : np.ndarray
        Complex (or real) sample values. Stored read-only; operations
        return new instances.
    sample_period : float
        Seconds between samples, > 0.
    start_index : int
        Grid index of samples[0]; sample i is at time (start_index+i)*Ts.
    """

    samples: np.ndarray
    sample_period: float
    start_index: int = 0

    def __post_init__(self):
        if not self.sample_period > 0:
            raise ConfigurationError("sample_period must be > 0")
        arr = np.atleast_1d(np.asarray(self.samples))
        if not np.issubdtype(arr.dtype, np.complexfloating):
            arr = arr.astype(np.float64) if not np.issubdtype(arr.dtype, np.floating) else arr
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "start_index", int(self.start_index))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def end_index(self) -> int:
        """One past the last occupied grid index."""
        return self.start_index + len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return (self.start_index + np.arange(len(self.samples))) * self.sample_period

    def energy(self) -> float:
        """Integral of |x|^2 dt approximated as sum * sample_period."""
        return float(np.sum(np.abs(self.samples) ** 2) * self.sample_period)

    def is_real(self, tol: float = 0.0) -> bool:
        if not np.iscomplexobj(self.samples):
            return True
        scale = np.max(np.abs(self.samples), initial=0.0)
        return bool(np.max(np.abs(self.samples.imag), initial=0.0) <= tol * max(scale, 1.0))

    def real(self) -> "SampledSignal":
        return SampledSignal(np.real(self.samples), self.sample_period, self.start_index)

    def scaled(self, alpha: complex) -> "SampledSignal":
        return SampledSignal(self.samples * alpha, self.sample_period, self.start_index)

    def delayed(self, samples: int) -> "SampledSignal":
        """Shift on the grid by an integer number of samples."""
        return SampledSignal(self.samples, self.sample_period, self.start_index + samples)

    def value_at(self, index: int) -> complex:
        """Sample value at absolute grid index (0 outside the support)."""
        i = index - self.start_index
        if 0 <= i < len(self.samples):
            return self.samples[i]
        return 0.0


def _check_periods(a: SampledSignal, b: SampledSignal) -> None:
    if not np.isclose(a.sample_period, b.sample_period, rtol=1e-12, atol=0.0):
        raise ConfigurationError(
            f"mismatched sample periods: {a.sample_period} vs {b.sample_period}"
        )


def convolve(a: SampledSignal, b: SampledSignal) -> SampledSignal:
    """Full linear convolution; start indices add."""
    _check_periods(a, b)
    out = _sp_convolve(a.samples, b.samples, mode="full", method="auto")
    return SampledSignal(out, a.sample_period, a.start_index + b.start_index)


def add(a: SampledSignal, b: SampledSignal) -> SampledSignal:
    """Sample-wise sum respecting grid placement (supports may differ)."""
    _check_periods(a, b)
    lo = min(a.start_index, b.start_index)
    hi = max(a.end_index, b.end_index)
    dtype = np.result_type(a.samples.dtype, b.samples.dtype)
    out = np.zeros(hi - lo, dtype=dtype)
    out[a.start_index - lo : a.end_index - lo] += a.samples
    out[b.start_index - lo : b.end_index - lo] += b.samples
    return SampledSignal(out, a.sample_period, lo)


def subtract(a: SampledSignal, b: SampledSignal) -> SampledSignal:
    return add(a, b.scaled(-1.0))


def apply_frequency_response(x: SampledSignal, response, min_pad: int = 0) -> SampledSignal:
    """Filter x with a frequency response H(omega).

    The signal is zero-padded on both sides by ``min_pad`` samples (the
    caller's estimate of the filter's impulse-response support) and the
    FFT length is rounded up to a power of two, so circular aliasing
    stays below the padding tails.

    Parameters
    ----------
    x : SampledSignal
        Non-empty input.
    response : callable
        Maps angular frequency [rad/s] (ndarray) to complex gain.
    min_pad : int
        Samples of support to reserve on each side of the input.
    """
    if len(x) == 0:
        raise ConfigurationError("cannot filter an empty signal")
    pad = max(int(min_pad), 0)
    n = _next_pow2(len(x) + 2 * pad)
    left = pad
    buf = np.zeros(n, dtype=np.complex128)
    buf[left : left + len(x)] = x.samples
    omega = 2.0 * np.pi * np.fft.fftfreq(n, d=x.sample_period)
    spec = np.fft.fft(buf) * np.asarray(response(omega), dtype=np.complex128)
    out = np.fft.ifft(spec)
    # keep the padded window; trailing circular region beyond it is dropped
    out = out[: len(x) + 2 * pad]
    return SampledSignal(out, x.sample_period, x.start_index - pad)


def add_awgn(x: SampledSignal, noise_psd: float, rng_seed) -> SampledSignal:
    """Add circular complex white Gaussian noise.

    ``noise_psd`` is the two-sided PSD N0 of the complex noise in
    (signal units)^2 per Hz; the per-sample complex variance is
    N0 / sample_period, split evenly between real and imaginary parts.
    Deterministic for a fixed seed.
    """
    if noise_psd < 0:
        raise ConfigurationError("noise_psd must be >= 0")
    if noise_psd == 0:
        return x
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    var = noise_psd / x.sample_period
    scale = np.sqrt(var / 2.0)
    n = rng.standard_normal(len(x)) + 1j * rng.standard_normal(len(x))
    return SampledSignal(x.samples + scale * n, x.sample_period, x.start_index)


def inner_product(a: SampledSignal, b: SampledSignal, shift: int = 0) -> complex:
    """sum_i a[i] * conj(b[i - shift]) over the overlapping grid region.

    ``shift`` is in samples and delays b on the common grid; absolute
    start indices are honored.
    """
    _check_periods(a, b)
    b_start = b.start_index + shift
    lo = max(a.start_index, b_start)
    hi = min(a.end_index, b_start + len(b))
    if hi <= lo:
        return 0.0 + 0.0j
    sa = a.samples[lo - a.start_index : hi - a.start_index]
    sb = b.samples[lo - b_start : hi - b_start]
    return complex(np.sum(sa * np.conj(sb)))


def correlate_at_strides(y: SampledSignal, h: SampledSignal, stride: int):
    """Inner products <y, h(. - k*stride)> for every integer k with overlap.

    Returns (values, k_first) where values[j] corresponds to k = k_first + j.
    Equivalent to calling :func:`inner_product` per shift but computed with
    one FFT correlation pass.
    """
    _check_periods(y, h)
    if len(y) == 0 or len(h) == 0:
        return np.zeros(0), 0
    full = _sp_convolve(y.samples, np.conj(h.samples[::-1]), mode="full", method="auto")
    # full[j] holds the local-lag-(j - len(h) + 1) cross-correlation; shift k
    # maps to local lag k*stride + (h.start_index - y.start_index)
    lag0 = h.start_index - y.start_index
    lag_first = -(len(h) - 1)
    k_first = int(np.ceil((lag_first - lag0) / stride))
    k_last = (len(full) - 1 + lag_first - lag0) // stride
    ks = np.arange(k_first, k_last + 1)
    vals = full[ks * stride + lag0 - lag_first]
    if not (np.iscomplexobj(y.samples) or np.iscomplexobj(h.samples)):
        vals = vals.real
    return vals, k_first
