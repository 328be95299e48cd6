"""Matched-filter / whitening-filter front end per model branch.

Each branch correlates the photodetected signal with its kernel at symbol
spacing, then applies the inverse of the minimum-phase spectral factor of
the kernel's folded autocorrelation. With white post-detection noise the
branch output noise is white and the signal sees the causal minimum-phase
equivalent response c_u.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .signal import ConfigurationError, SampledSignal, correlate_at_strides
from .volterra import OrthoKernelSet

logger = logging.getLogger(__name__)

EQUIVALENT_TAP_ENERGY_FLOOR = 1e-4  # relative to the peak tap energy


@dataclass(frozen=True)
class BranchFilters:
    """Filters and equivalent response of one receiver branch.

    ``whitening`` holds the causal expansion v of 1/F (F = minimum-phase
    spectral factor); it is applied time-reversed, r[k] = sum_t v[t] z[k+t],
    so the equivalent response c stays causal and minimum phase.
    ``equivalent_offsets`` are the symbol lags of the kept c taps.
    """

    kernel_index: int
    matched: SampledSignal
    whitening: np.ndarray
    equivalent: np.ndarray
    equivalent_offsets: np.ndarray
    autocorr: np.ndarray
    autocorr_first_lag: int

    def __post_init__(self):
        for name in ("whitening", "equivalent", "equivalent_offsets", "autocorr"):
            arr = np.asarray(getattr(self, name))
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def matched_len_symbols(self) -> int:
        """Matched-filter length at symbol spacing (for complexity counts)."""
        r = self.autocorr  # symmetric support of rho equals the MF symbol span
        return (len(r) + 1) // 2

    @property
    def whitening_len(self) -> int:
        return len(self.whitening)


def minimum_phase_factor(power_spectrum: np.ndarray) -> np.ndarray:
    """Causal minimum-phase sequence whose FFT magnitude squared equals the
    given (non-negative) power spectrum, via cepstral factorization.

    log S has the two-sided cepstrum c_n = 2 l_n of log|F|; the causal
    log-spectrum of F is c_0/2 + sum_{n>0} c_n z^-n.
    """
    n = len(power_spectrum)
    floor = np.max(power_spectrum) * 1e-14
    spec = np.maximum(power_spectrum, floor)
    cep = np.fft.ifft(np.log(spec)).real
    folded = np.zeros(n)
    folded[0] = 0.5 * cep[0]
    folded[1 : n // 2] = cep[1 : n // 2]
    folded[n // 2] = 0.5 * cep[n // 2]
    return np.fft.ifft(np.exp(np.fft.fft(folded))).real


def causal_inverse(f: np.ndarray, num_taps: int) -> np.ndarray:
    """First ``num_taps`` taps of the causal expansion of 1/F(z)."""
    if f[0] == 0:
        raise ConfigurationError("spectral factor has zero leading tap")
    v = np.zeros(num_taps)
    v[0] = 1.0 / f[0]
    for n in range(1, num_taps):
        jmax = min(n, len(f) - 1)
        acc = np.dot(f[1 : jmax + 1], v[n - jmax : n][::-1])
        v[n] = -acc / f[0]
    return v


def kernel_autocorrelation(h: SampledSignal, stride: int):
    """<h, h(.-n*stride)> for all overlapping symbol lags n."""
    vals, k_first = correlate_at_strides(h, h, stride)
    return np.real(vals), k_first


def build_branch_filters(oks: OrthoKernelSet, num_branches: int, whitening_taps: int = 15):
    """Matched + whitening filter and equivalent response for the first
    ``num_branches`` kernels in pivot order."""
    if not 1 <= num_branches <= oks.num_kernels:
        raise ConfigurationError("branch count must be in 1..M")
    if whitening_taps < 1:
        raise ConfigurationError("need at least one whitening tap")
    r = oks.samples_per_symbol
    branches = []
    for p in oks.pivot_order[:num_branches]:
        h = oks.kernel(p)
        rho, lag_first = kernel_autocorrelation(h, r)
        # autocorrelation of trimmed kernels is symmetric about lag 0
        nfft = max(4096, 1 << (len(rho) * 8 - 1).bit_length())
        spec_input = np.zeros(nfft)
        lags = np.arange(lag_first, lag_first + len(rho))
        spec_input[lags % nfft] = rho
        spectrum = np.fft.fft(spec_input).real
        if spectrum.min() <= 0.0:
            logger.warning(
                "branch %d autocorrelation spectrum is not positive definite "
                "(min %.3e); regularizing lag 0",
                p,
                spectrum.min(),
            )
            bump = 1e-10 * rho[np.nonzero(lags == 0)[0][0]] + abs(spectrum.min())
            spec_input[0] += bump
            spectrum = np.fft.fft(spec_input).real
        factor_full = minimum_phase_factor(spectrum)
        # keep the numerically significant head of F for the inverse recursion
        mags = np.abs(factor_full)
        keep = max(np.nonzero(mags > 1e-12 * mags.max())[0].max() + 1, 2)
        factor = factor_full[: min(keep, nfft // 2)]
        wf = causal_inverse(factor, whitening_taps)
        # c = rho * time-reversed(wf); lags shift down by the wf lookahead
        c_full = np.convolve(rho, wf[::-1])
        c_lags = np.arange(lag_first - (len(wf) - 1), lag_first - (len(wf) - 1) + len(c_full))
        peak = np.max(c_full**2)
        good = np.nonzero(c_full**2 >= EQUIVALENT_TAP_ENERGY_FLOOR * peak)[0]
        sl = slice(good[0], good[-1] + 1)
        matched = SampledSignal(
            np.conj(h.samples[::-1]), h.sample_period, -(h.end_index - 1)
        )
        branches.append(
            BranchFilters(
                kernel_index=int(p),
                matched=matched,
                whitening=wf,
                equivalent=c_full[sl],
                equivalent_offsets=c_lags[sl],
                autocorr=rho,
                autocorr_first_lag=int(lag_first),
            )
        )
    return branches


def branch_symbol_outputs(
    y: SampledSignal,
    branches,
    oks: OrthoKernelSet,
    num_symbols: int,
) -> np.ndarray:
    """Front-end outputs r_u[k] for k = 0..num_symbols-1.

    Matched filtering is an exact strided correlation against the branch
    kernel; whitening is applied anticausally so the signal part sees the
    causal equivalent response. Samples outside the computed overlap are
    zero (callers discard edges).
    """
    r = oks.samples_per_symbol
    out = np.zeros((len(branches), num_symbols))
    for u, br in enumerate(branches):
        h = oks.kernel(br.kernel_index)
        vals, k_first = correlate_at_strides(y, h, r)
        vals = np.real(vals)
        wf = br.whitening
        lookahead = len(wf) - 1
        # dense z over k = 0..num_symbols-1+lookahead
        z = np.zeros(num_symbols + lookahead)
        src_lo = max(k_first, 0)
        src_hi = min(k_first + len(vals), num_symbols + lookahead)
        if src_hi > src_lo:
            z[src_lo:src_hi] = vals[src_lo - k_first : src_hi - k_first]
        filt = np.convolve(z, wf[::-1])
        out[u] = filt[lookahead : lookahead + num_symbols]
    return out
