"""Second-order kernel expansion of the square-law detected signal and
its shift-orthogonalized re-expression.

The detected waveform decomposes exactly as

    y(t) = sum_k a_k^2 f_0(t-kT) + sum_{m>=1} sum_k a_k a_{k+m} f_m(t-kT)

with f_0 = |g|^2 and f_m = 2 Re{g(t) g*(t-mT)} built from the dispersed
pulse g. The orthogonalization walks a pivot order; at each step the
remaining kernels are least-squares projected onto symbol-spaced shifts
of the pivot and replaced by their residuals, while the projection
coefficients re-route the corresponding symbol products into the pivot's
excitation stream. Truncating the resulting model keeps most of the
signal energy in few branches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.signal

from .channel import LinkConfig, dispersed_pulse
from .signal import ConfigurationError, SampledSignal

logger = logging.getLogger(__name__)

KERNEL_TRUNCATION = 1e-8  # amplitude relative to the largest kernel peak
ORTHO_RESIDUAL_TOL = 1e-8  # normalized inner-product bound after projection


@dataclass(frozen=True)
class KernelSet:
    """Raw second-order kernels f_0..f_{M-1} on a common support window.

    ``kernels`` is an (M, L) real array; row m holds f_m. All rows share
    ``start_index`` on the simulation grid and the symbol spacing is
    ``samples_per_symbol`` samples.
    """

    kernels: np.ndarray
    sample_period: float
    start_index: int
    samples_per_symbol: int

    def __post_init__(self):
        arr = np.asarray(self.kernels, dtype=np.float64)
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "kernels", arr)

    @property
    def num_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_len(self) -> int:
        return self.kernels.shape[1]

    def kernel(self, m: int) -> SampledSignal:
        return SampledSignal(self.kernels[m], self.sample_period, self.start_index)

    def energies(self) -> np.ndarray:
        return np.sum(self.kernels**2, axis=1) * self.sample_period


@dataclass(frozen=True)
class OrthoKernelSet:
    """Orthogonalized kernels, still indexed by original kernel id.

    ``pivot_order`` lists original indices in the order they were used as
    pivots; truncated models keep the first U entries. ``lambda_table``
    maps (pivot, kernel) to the projection coefficients over ``shifts``
    symbol-spaced delays (negative shift = advance).
    """

    kernels: np.ndarray
    sample_period: float
    start_index: int
    samples_per_symbol: int
    pivot_order: Tuple[int, ...]
    shifts: np.ndarray
    lambda_table: Dict[Tuple[int, int], np.ndarray]

    def __post_init__(self):
        arr = np.asarray(self.kernels, dtype=np.float64).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "kernels", arr)
        sh = np.asarray(self.shifts, dtype=np.int64).copy()
        sh.flags.writeable = False
        object.__setattr__(self, "shifts", sh)
        object.__setattr__(self, "pivot_order", tuple(int(p) for p in self.pivot_order))

    @property
    def num_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_len(self) -> int:
        return self.kernels.shape[1]

    @property
    def num_shifts(self) -> int:
        return len(self.shifts)

    def kernel(self, m: int) -> SampledSignal:
        return SampledSignal(self.kernels[m], self.sample_period, self.start_index)

    def energies_in_pivot_order(self) -> np.ndarray:
        return np.array(
            [np.sum(self.kernels[p] ** 2) * self.sample_period for p in self.pivot_order]
        )


@dataclass(frozen=True)
class BStreams:
    """Per-kernel excitation streams b^(m)_k after the pivot substitution."""

    streams: np.ndarray  # (M, K)

    def stream(self, m: int) -> np.ndarray:
        return self.streams[m]


def extract_kernels(cfg: LinkConfig, num_kernels: int) -> KernelSet:
    """Sample f_0..f_{M-1} from the dispersed pulse g.

    All kernels are laid on g's support window, then jointly truncated
    where every kernel is below KERNEL_TRUNCATION of the largest peak.
    """
    if num_kernels < 1:
        raise ConfigurationError("need at least one kernel")
    g = dispersed_pulse(cfg)
    r = cfg.samples_per_symbol
    gs = g.samples
    n = len(gs)
    kernels = np.zeros((num_kernels, n))
    kernels[0] = np.abs(gs) ** 2
    for m in range(1, num_kernels):
        d = m * r
        if d < n:
            kernels[m, d:] = 2.0 * np.real(gs[d:] * np.conj(gs[: n - d]))
    peak = np.abs(kernels).max()
    col_amp = np.abs(kernels).max(axis=0)
    keep = np.nonzero(col_amp >= KERNEL_TRUNCATION * peak)[0]
    lo, hi = keep[0], keep[-1] + 1
    return KernelSet(kernels[:, lo:hi], g.sample_period, g.start_index + lo, r)


def default_pivot_order(ks: KernelSet) -> Tuple[int, ...]:
    """Energy-descending over the raw kernels; ties broken by index."""
    energies = ks.energies()
    return tuple(int(i) for i in np.argsort(-energies, kind="stable"))


def default_shift_count(kernel_len: int, samples_per_symbol: int, num_kernels: int) -> int:
    """Shift count spanning the whole common support on both sides."""
    span = int(np.ceil(kernel_len / samples_per_symbol))
    half = (span + 1) // 2 + num_kernels
    return 2 * half + 1


def _shift_matrix(pivot: np.ndarray, shifts: np.ndarray, r: int) -> np.ndarray:
    length = len(pivot)
    mat = np.zeros((length, len(shifts)))
    for j, n in enumerate(shifts):
        d = int(n) * r
        if d >= 0:
            if d < length:
                mat[d:, j] = pivot[: length - d]
        else:
            if -d < length:
                mat[: length + d, j] = pivot[-d:]
    return mat


def orthogonalize(
    ks: KernelSet,
    pivot_order: Optional[Sequence[int]] = None,
    num_shifts: Optional[int] = None,
    shift_mode: str = "delays",
) -> OrthoKernelSet:
    """Pivot-ordered shift orthogonalization of a kernel set.

    At step s the pivot kernel p_s (its current residual) spans a family
    of symbol-spaced shifted copies; every not-yet-pivoted kernel is
    projected onto that family with a minimum-norm least-squares solve
    and replaced by the projection residual. One refinement pass keeps
    the residuals orthogonal to the family at machine precision even for
    the near-rank-deficient matrices shifted smooth pulses produce.
    """
    m_total = ks.num_kernels
    r = ks.samples_per_symbol
    if pivot_order is None:
        pivot_order = default_pivot_order(ks)
    else:
        pivot_order = tuple(int(p) for p in pivot_order)
        if sorted(pivot_order) != list(range(m_total)):
            raise ConfigurationError(
                f"pivot_order must be a permutation of 0..{m_total - 1}, got {pivot_order}"
            )
    if num_shifts is None:
        num_shifts = default_shift_count(ks.kernel_len, r, m_total)
    if num_shifts < 1:
        raise ConfigurationError("need at least one shift per projection")
    if shift_mode == "delays":
        shifts = np.arange(num_shifts)
    elif shift_mode == "symmetric":
        half_lo = num_shifts // 2
        shifts = np.arange(-half_lo, num_shifts - half_lo)
    else:
        raise ConfigurationError(f"unknown shift_mode {shift_mode!r}")

    # Residual supports grow by one shift span per step; padding the window
    # up front keeps every shifted pivot fully represented, which makes the
    # substitution identity exact instead of truncated at the window edge.
    max_shift = int(np.max(np.abs(shifts))) if len(shifts) else 0
    ext = max(m_total - 1, 0) * max_shift * r
    work = np.zeros((m_total, ks.kernel_len + 2 * ext))
    work[:, ext : ext + ks.kernel_len] = ks.kernels
    peak_energy = float(np.max(np.sum(work**2, axis=1)))
    lambda_table: Dict[Tuple[int, int], np.ndarray] = {}

    for s, p in enumerate(pivot_order):
        rest = list(pivot_order[s + 1 :])
        if not rest:
            break
        pivot = work[p]
        if np.sum(pivot**2) <= 1e-24 * peak_energy:
            raise ConfigurationError(f"pivot kernel {p} is numerically zero")
        mat = _shift_matrix(pivot, shifts, r)
        targets = work[rest].T
        lam, _, rank, _ = scipy.linalg.lstsq(mat, targets)
        if rank < len(shifts):
            logger.warning(
                "shift matrix for pivot %d is rank deficient (%d < %d); "
                "using minimum-norm solution",
                p,
                rank,
                len(shifts),
            )
        resid = targets - mat @ lam
        # one re-projection pass scrubs the residual orthogonality
        lam2, _, _, _ = scipy.linalg.lstsq(mat, resid)
        lam += lam2
        resid = resid - mat @ lam2
        for col, q in enumerate(rest):
            lambda_table[(p, q)] = lam[:, col].copy()
        work[rest] = resid.T

    return OrthoKernelSet(
        kernels=work,
        sample_period=ks.sample_period,
        start_index=ks.start_index - ext,
        samples_per_symbol=r,
        pivot_order=pivot_order,
        shifts=shifts,
        lambda_table=lambda_table,
    )


def orthogonality_residuals(oks: OrthoKernelSet) -> np.ndarray:
    """Normalized |<h_q, h_p(.-nR)>| for every projected (p, q, n) triple.

    Computed by direct inner products, independent of the solver path.
    """
    out = []
    r = oks.samples_per_symbol
    order = oks.pivot_order
    for s, p in enumerate(order):
        hp = oks.kernels[p]
        np_norm = np.linalg.norm(hp)
        mat = _shift_matrix(hp, oks.shifts, r)
        for q in order[s + 1 :]:
            hq = oks.kernels[q]
            nq_norm = np.linalg.norm(hq)
            if nq_norm == 0 or np_norm == 0:
                continue
            vals = np.abs(mat.T @ hq) / (np_norm * nq_norm)
            out.append(vals)
    if not out:
        return np.zeros(0)
    return np.concatenate(out)


def raw_product_streams(symbols: Sequence[float], num_kernels: int) -> np.ndarray:
    """x^(0)_k = a_k^2 and x^(m)_k = a_k a_{k+m}; zero where k+m leaves
    the block."""
    a = np.asarray(symbols, dtype=np.float64)
    k = len(a)
    x = np.zeros((num_kernels, k))
    x[0] = a * a
    for m in range(1, num_kernels):
        if m < k:
            x[m, : k - m] = a[: k - m] * a[m:]
    return x


def expand_b_streams(symbols: Sequence[float], oks: OrthoKernelSet) -> BStreams:
    """Excitation streams of the orthogonal model.

    Walking the pivot order, each pivot's stream accumulates
    sum_q sum_n lambda_n^(p,q) x^(q)_{k-n} from every kernel projected
    onto it; kernels keep their raw streams for their own residuals.
    """
    m_total = oks.num_kernels
    if len(symbols) < m_total:
        raise ConfigurationError("need at least as many symbols as kernels")
    x = raw_product_streams(symbols, m_total)
    k = x.shape[1]
    b = x.copy()
    order = oks.pivot_order
    for s, p in enumerate(order):
        for q in order[s + 1 :]:
            lam = oks.lambda_table.get((p, q))
            if lam is None:
                continue
            for coeff, n in zip(lam, oks.shifts):
                if coeff == 0.0:
                    continue
                n = int(n)
                if n >= 0:
                    if n < k:
                        b[p, n:] += coeff * x[q, : k - n]
                else:
                    if -n < k:
                        b[p, : k + n] += coeff * x[q, -n:]
    return BStreams(streams=b)


def _synthesize(streams: np.ndarray, kernels: np.ndarray, rows: Sequence[int],
                sample_period: float, start_index: int, r: int) -> SampledSignal:
    k = streams.shape[1]
    length = (k - 1) * r + kernels.shape[1]
    out = np.zeros(length)
    up = np.zeros((k - 1) * r + 1)
    for row in rows:
        up[::r] = streams[row]
        out += scipy.signal.fftconvolve(up, kernels[row])
    return SampledSignal(out, sample_period, start_index)


def synthesize_volterra(symbols: Sequence[float], ks: KernelSet, num_branches: int) -> SampledSignal:
    """Truncated raw-kernel model: first U kernels in natural order."""
    if not 1 <= num_branches <= ks.num_kernels:
        raise ConfigurationError("branch count must be in 1..M")
    x = raw_product_streams(symbols, ks.num_kernels)
    return _synthesize(
        x, ks.kernels, range(num_branches), ks.sample_period, ks.start_index, ks.samples_per_symbol
    )


def synthesize_orthogonal(symbols: Sequence[float], oks: OrthoKernelSet, num_branches: int) -> SampledSignal:
    """Truncated orthogonal model: first U kernels in pivot order."""
    if not 1 <= num_branches <= oks.num_kernels:
        raise ConfigurationError("branch count must be in 1..M")
    b = expand_b_streams(symbols, oks)
    rows = oks.pivot_order[:num_branches]
    return _synthesize(
        b.streams, oks.kernels, rows, oks.sample_period, oks.start_index, oks.samples_per_symbol
    )


def smse(reference: SampledSignal, model: SampledSignal) -> float:
    """Signal-to-mean-square-error ratio in dB.

    10 log10(sum|y|^2 / sum|y - y_model|^2); +inf when the error is
    exactly zero. Both signals must share the sample period; supports
    are aligned on the common grid.
    """
    from .signal import subtract

    ref_energy = float(np.sum(np.abs(reference.samples) ** 2))
    if ref_energy == 0.0:
        raise ConfigurationError("reference signal has zero energy")
    err = subtract(reference, model)
    err_energy = float(np.sum(np.abs(err.samples) ** 2))
    if err_energy == 0.0:
        return np.inf
    return 10.0 * np.log10(ref_energy / err_energy)


def crop(x: SampledSignal, lo_index: int, hi_index: int) -> SampledSignal:
    """Restrict to grid indices [lo_index, hi_index); zero-padded view is
    not created, the window must intersect the support."""
    lo = max(lo_index, x.start_index)
    hi = min(hi_index, x.end_index)
    if hi <= lo:
        raise ConfigurationError("crop window does not intersect the signal support")
    return SampledSignal(
        x.samples[lo - x.start_index : hi - x.start_index], x.sample_period, lo
    )
