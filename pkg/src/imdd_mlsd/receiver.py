"""MLSD receivers: trellis construction, the model-based sigma metric,
the trained mu metric, Viterbi decoding, and an exhaustive-search oracle.

All detectors share one trellis convention: the state after consuming
symbol a_k is the window (a_{k-L+1}, ..., a_k) encoded base-A with a_k as
the least significant digit, giving A^L states whose branch metric
depends on the destination state only. Model terms whose symbol
dependencies fall outside the window are dropped at design time and the
scored received sample is taken ``delay`` symbols behind the window head,
with ``delay`` chosen to maximize the captured model energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .channel import Constellation, LinkConfig
from .signal import ConfigurationError, SampledSignal, correlate_at_strides
from .volterra import KernelSet, OrthoKernelSet
from .whitening import BranchFilters, branch_symbol_outputs, build_branch_filters

logger = logging.getLogger(__name__)

NOPF_MU = "NOPF_MU"
VPF_SIGMA = "VPF_SIGMA"
VPF_MU = "VPF_MU"
DESIGN_KINDS = (NOPF_MU, VPF_SIGMA, VPF_MU)

TERM_COEFF_FLOOR = 1e-9  # relative to the largest model term


class CoverageError(RuntimeError):
    """Training did not observe every trellis context."""

    def __init__(self, missing: np.ndarray, num_states: int, suggested_len: int):
        self.missing = missing
        self.num_states = num_states
        self.suggested_len = suggested_len
        shown = ", ".join(str(int(m)) for m in missing[:10])
        more = "" if len(missing) <= 10 else f" (+{len(missing) - 10} more)"
        super().__init__(
            f"{len(missing)}/{num_states} trellis contexts unseen in training "
            f"[{shown}{more}]; suggest at least {suggested_len} training symbols"
        )


@dataclass(frozen=True)
class TrellisSpec:
    """State space of the sequence detector."""

    alphabet_size: int
    memory: int

    def __post_init__(self):
        if self.memory < 1:
            raise ConfigurationError("trellis memory must be >= 1")
        if self.alphabet_size < 2:
            raise ConfigurationError("alphabet must have at least 2 symbols")

    @property
    def num_states(self) -> int:
        return self.alphabet_size**self.memory

    def state_windows(self) -> np.ndarray:
        """(S, memory) symbol indices; column j is position j of the window,
        oldest first, newest (the just-consumed symbol) last."""
        s = np.arange(self.num_states)
        cols = []
        for j in range(self.memory):
            i = self.memory - 1 - j  # digit i holds a_{k-i}
            cols.append((s // self.alphabet_size**i) % self.alphabet_size)
        return np.stack(cols, axis=1)

    def encode_states(self, symbol_indices: np.ndarray) -> np.ndarray:
        """Destination state at each step k >= memory-1 (earlier steps get
        the partial window encoded with leading zeros)."""
        idx = np.asarray(symbol_indices, dtype=np.int64)
        states = np.zeros(len(idx), dtype=np.int64)
        mod = self.alphabet_size**self.memory
        acc = 0
        out = np.empty(len(idx), dtype=np.int64)
        for k in range(len(idx)):
            acc = (acc * self.alphabet_size + int(idx[k])) % mod
            out[k] = acc
        return out


# ---------------------------------------------------------------------------
# model terms: r_u[t] ~ sum coeff * a_{t+o1} * a_{t+o2}
# represented as (q, s): x^(q)_{t-s} = a_{t-s} * a_{t-s+q}


def sigma_model_terms(oks: OrthoKernelSet, branch: BranchFilters) -> Dict[Tuple[int, int], float]:
    """Predictor terms of the model-based branch output: equivalent
    response convolved with the pivot's substituted excitation stream."""
    p = branch.kernel_index
    order = oks.pivot_order
    rank = order.index(p)
    lam_terms: List[Tuple[int, int, float]] = [(p, 0, 1.0)]
    for q in order[rank + 1 :]:
        lam = oks.lambda_table.get((p, q))
        if lam is None:
            continue
        for coeff, n in zip(lam, oks.shifts):
            if coeff != 0.0:
                lam_terms.append((q, int(n), float(coeff)))
    terms: Dict[Tuple[int, int], float] = {}
    for d, cval in zip(branch.equivalent_offsets, branch.equivalent):
        for q, n, lv in lam_terms:
            key = (q, n + int(d))
            terms[key] = terms.get(key, 0.0) + float(cval) * lv
    return _prune_terms(terms)


def exact_response_terms(
    ks: KernelSet,
    branch: Optional[BranchFilters],
    oks: Optional[OrthoKernelSet],
    sample_phase: int = 0,
) -> Dict[Tuple[int, int], float]:
    """Exact linear-in-products expansion of a branch output, from the raw
    kernels: gamma_{m}[n] terms. With no branch, the output is the
    photodetected signal sampled at ``sample_phase``."""
    terms: Dict[Tuple[int, int], float] = {}
    r = ks.samples_per_symbol
    for m in range(ks.num_kernels):
        fm = ks.kernel(m)
        if branch is None:
            # gamma_m[n] = f_m(nT + phase)
            lo = int(np.ceil((fm.start_index - sample_phase) / r))
            hi = (fm.end_index - 1 - sample_phase) // r
            lags = np.arange(lo, hi + 1)
            vals = np.array([fm.value_at(n * r + sample_phase).real for n in lags])
        else:
            h = oks.kernel(branch.kernel_index)
            rho_mu, k_first = correlate_at_strides(fm, h, r)
            rho_mu = np.real(rho_mu)
            wf = branch.whitening
            vals_full = np.convolve(rho_mu, wf[::-1])
            lags = np.arange(k_first - (len(wf) - 1), k_first - (len(wf) - 1) + len(vals_full))
            vals = vals_full
        for n, v in zip(lags, vals):
            if v != 0.0:
                key = (m, int(n))
                terms[key] = terms.get(key, 0.0) + float(v)
    return _prune_terms(terms)


def _prune_terms(terms: Dict[Tuple[int, int], float]) -> Dict[Tuple[int, int], float]:
    if not terms:
        return terms
    peak = max(abs(v) for v in terms.values())
    return {k: v for k, v in terms.items() if abs(v) >= TERM_COEFF_FLOOR * peak}


def _term_weight(q: int, constellation: Constellation) -> float:
    lv = constellation.levels
    if q == 0:
        return float(np.mean(lv**4))
    return float(np.mean(lv**2) ** 2)


def choose_delay(
    terms: Dict[Tuple[int, int], float],
    trellis: TrellisSpec,
    constellation: Constellation,
) -> int:
    """Sample-to-window alignment maximizing the captured term energy.

    A term (q, s) scored at trellis step k touches symbols a_{k-delay-s}
    and a_{k-delay-s+q}; it is captured when both land in the window
    (a_{k-memory+1}, ..., a_k).
    """
    best_delay, best_score = 0, -1.0
    span = trellis.memory + max(abs(s) for q, s in terms) + max(q for q, s in terms) + 2
    for delay in range(-span, span + 1):
        score = 0.0
        for (q, s), coeff in terms.items():
            o1 = -delay - s
            o2 = o1 + q
            if o1 >= -trellis.memory + 1 and o2 <= 0:
                score += coeff * coeff * _term_weight(q, constellation)
        if score > best_score + 1e-15 * abs(best_score):
            best_delay, best_score = delay, score
    return best_delay


def emission_table(
    terms: Dict[Tuple[int, int], float],
    delay: int,
    trellis: TrellisSpec,
    constellation: Constellation,
) -> np.ndarray:
    """Window-truncated model prediction for every destination state."""
    windows = trellis.state_windows()  # (S, memory), oldest first
    amp = constellation.levels[windows]
    table = np.zeros(trellis.num_states)
    mem = trellis.memory
    for (q, s), coeff in terms.items():
        o1 = -delay - s
        o2 = o1 + q
        if o1 < -mem + 1 or o2 > 0:
            continue
        j1 = o1 + mem - 1
        j2 = o2 + mem - 1
        table += coeff * amp[:, j1] * amp[:, j2]
    return table


def captured_energy_fraction(
    terms: Dict[Tuple[int, int], float],
    delay: int,
    trellis: TrellisSpec,
    constellation: Constellation,
) -> float:
    total = sum(c * c * _term_weight(q, constellation) for (q, s), c in terms.items())
    kept = 0.0
    for (q, s), c in terms.items():
        o1 = -delay - s
        if o1 >= -trellis.memory + 1 and o1 + q <= 0:
            kept += c * c * _term_weight(q, constellation)
    return kept / total if total > 0 else 1.0


# ---------------------------------------------------------------------------
# mu metric


@dataclass(frozen=True)
class MuTable:
    """Per-context trained means of the branch outputs.

    means is (U, S); counts (S,) is shared across branches since every
    branch sees the same symbol contexts. ``delay`` records the
    sample-to-window alignment used during training.
    """

    means: np.ndarray
    counts: np.ndarray
    trellis: TrellisSpec
    delay: int
    training_len: int

    def __post_init__(self):
        for name in ("means", "counts"):
            arr = np.asarray(getattr(self, name)).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def coverage(self) -> float:
        return float(np.mean(self.counts > 0))


def train_mu(
    received: np.ndarray,
    training_indices: np.ndarray,
    trellis: TrellisSpec,
    delay: int,
    min_count: int = 1,
) -> MuTable:
    """Accumulate branch outputs into their transmitted-context bins.

    ``received`` is (U, K) aligned so that received[:, k] corresponds to
    symbol index k; the sample attributed to the context ending at symbol
    k is received[:, k - delay]. Raises CoverageError when any context
    has fewer than ``min_count`` hits.
    """
    received = np.atleast_2d(np.asarray(received, dtype=np.float64))
    idx = np.asarray(training_indices, dtype=np.int64)
    k_total = len(idx)
    if received.shape[1] != k_total:
        raise ConfigurationError("received length must match training symbols")
    states = trellis.encode_states(idx)
    num_states = trellis.num_states
    lo = max(trellis.memory - 1, delay)
    hi = min(k_total, k_total + delay)  # k - delay < k_total
    ks = np.arange(lo, hi)
    ks = ks[(ks - delay >= 0) & (ks - delay < k_total)]
    st = states[ks]
    counts = np.bincount(st, minlength=num_states)
    sums = np.zeros((received.shape[0], num_states))
    for u in range(received.shape[0]):
        np.add.at(sums[u], st, received[u, ks - delay])
    if np.any(counts < min_count):
        missing = np.nonzero(counts < min_count)[0]
        p_state = 1.0 / num_states
        suggested = int(np.ceil(num_states * (np.log(num_states) + 5.0) * max(min_count, 1)))
        raise CoverageError(missing, num_states, suggested)
    means = sums / counts
    return MuTable(
        means=means, counts=counts, trellis=trellis, delay=delay, training_len=k_total
    )


# ---------------------------------------------------------------------------
# Viterbi


@njit(cache=True)
def _viterbi_core(received, tables, valid, alphabet, memory):
    num_states = tables.shape[1]
    num_branches = received.shape[0]
    k_total = received.shape[1]
    s_up = num_states // alphabet
    pm = np.zeros(num_states)
    npm = np.empty(num_states)
    bp = np.empty((k_total, num_states), dtype=np.uint8)
    for k in range(k_total):
        for s in range(num_states):
            base = s // alphabet
            best = np.inf
            bj = 0
            for j in range(alphabet):
                m = pm[base + j * s_up]
                if m < best:
                    best = m
                    bj = j
            cost = 0.0
            if valid[k]:
                t = k  # sample index already delay-compensated by caller
                for u in range(num_branches):
                    d = received[u, t] - tables[u, s]
                    cost += d * d
            npm[s] = best + cost
            bp[k, s] = bj
        pm[:] = npm
    # traceback from the global best end state
    s_best = 0
    m_best = pm[0]
    for s in range(1, num_states):
        if pm[s] < m_best:
            m_best = pm[s]
            s_best = s
    path = np.empty(k_total, dtype=np.int64)
    s = s_best
    for k in range(k_total - 1, -1, -1):
        path[k] = s % alphabet
        s = (s // alphabet) + bp[k, s] * s_up
    return path


def _aligned_received(received: np.ndarray, delay: int, k_total: int) -> np.ndarray:
    """Shift so column k holds the sample scored at trellis step k."""
    received = np.atleast_2d(received)
    out = np.zeros((received.shape[0], k_total))
    src = np.arange(k_total) - delay
    ok = (src >= 0) & (src < received.shape[1])
    out[:, ok] = received[:, src[ok]]
    return out


def _valid_steps(k_total: int, delay: int, trellis: TrellisSpec, received_len: int) -> np.ndarray:
    ks = np.arange(k_total)
    src = ks - delay
    return (ks >= trellis.memory - 1) & (src >= 0) & (src < received_len)


def viterbi_detect(
    received: np.ndarray,
    tables: np.ndarray,
    trellis: TrellisSpec,
    delay: int,
) -> np.ndarray:
    """Max-likelihood symbol indices under the squared-distance metric to
    per-state table values; ties go to the lowest-index predecessor."""
    received = np.atleast_2d(np.asarray(received, dtype=np.float64))
    tables = np.atleast_2d(np.asarray(tables, dtype=np.float64))
    if received.shape[0] != tables.shape[0]:
        raise ConfigurationError("branch count mismatch between samples and tables")
    k_total = received.shape[1]
    if k_total < trellis.memory:
        raise ConfigurationError("block shorter than trellis memory")
    aligned = _aligned_received(received, delay, k_total)
    valid = _valid_steps(k_total, delay, trellis, received.shape[1])
    return _viterbi_core(
        aligned, tables, valid, trellis.alphabet_size, trellis.memory
    )


def viterbi_sigma(received: np.ndarray, design: "ReceiverDesign") -> np.ndarray:
    if design.sigma_tables is None:
        raise ConfigurationError("design has no model tables (mu-metric design?)")
    return viterbi_detect(received, design.sigma_tables, design.trellis, design.delay)


def viterbi_mu(received: np.ndarray, table: MuTable) -> np.ndarray:
    if table.coverage < 1.0:
        raise CoverageError(
            np.nonzero(table.counts == 0)[0], table.trellis.num_states, 2 * table.training_len
        )
    return viterbi_detect(received, table.means, table.trellis, table.delay)


def brute_force_mlsd(
    received: np.ndarray,
    tables: np.ndarray,
    trellis: TrellisSpec,
    delay: int,
    block_len: int,
) -> np.ndarray:
    """Exhaustive search over all A^block_len symbol sequences for the
    minimum total metric; the validation oracle for the Viterbi path."""
    a = trellis.alphabet_size
    if a**block_len > 1 << 20:
        raise ConfigurationError("block too large for exhaustive search")
    received = np.atleast_2d(np.asarray(received, dtype=np.float64))
    tables = np.atleast_2d(np.asarray(tables, dtype=np.float64))
    k_total = received.shape[1]
    if k_total != block_len:
        raise ConfigurationError("received length must equal block_len")
    n_seq = a**block_len
    seqs = np.empty((n_seq, block_len), dtype=np.int64)
    ids = np.arange(n_seq)
    for k in range(block_len):
        # symbol k is a high-order digit so enumeration is lexicographic
        seqs[:, k] = (ids // a ** (block_len - 1 - k)) % a
    # rolling state per step
    aligned_idx = np.arange(block_len) - delay
    valid = _valid_steps(block_len, delay, trellis, k_total)
    mod = trellis.num_states
    states = np.zeros((n_seq,), dtype=np.int64)
    total = np.zeros(n_seq)
    for k in range(block_len):
        states = (states * a + seqs[:, k]) % mod
        if not valid[k]:
            continue
        r_col = received[:, aligned_idx[k]]
        diff = tables[:, states] - r_col[:, None]
        total += np.sum(diff * diff, axis=0)
    return seqs[int(np.argmin(total))]


def complexity_estimate(
    num_branches: int, matched_len: int, whitening_len: int, alphabet: int, memory: int
) -> int:
    """Multiplications per detected symbol of the branch filter bank plus
    the decoder metric evaluations."""
    if min(num_branches, matched_len, whitening_len, alphabet, memory) <= 0:
        raise ConfigurationError("all complexity parameters must be positive")
    return int(num_branches * (matched_len + whitening_len + alphabet**memory))


# ---------------------------------------------------------------------------
# receiver designs


@dataclass(frozen=True)
class ReceiverDesign:
    """Everything needed to run one detector on photodetected waveforms."""

    kind: str
    constellation: Constellation
    trellis: TrellisSpec
    delay: int
    branches: Tuple[BranchFilters, ...]
    sample_phase: int
    sigma_tables: Optional[np.ndarray]
    captured_fraction: float

    @property
    def num_branches(self) -> int:
        return max(len(self.branches), 1)

    def complexity(self, whitening_taps: Optional[int] = None) -> int:
        if not self.branches:
            # no filter bank; a single tap reads the sampled photocurrent
            return complexity_estimate(1, 1, 1, self.constellation.size, self.trellis.memory)
        lw = whitening_taps if whitening_taps is not None else self.branches[0].whitening_len
        lm = self.branches[0].matched_len_symbols
        return complexity_estimate(
            len(self.branches), lm, lw, self.constellation.size, self.trellis.memory
        )

    def front_end(self, y: SampledSignal, num_symbols: int, oks: OrthoKernelSet) -> np.ndarray:
        if self.kind == NOPF_MU:
            r = oks.samples_per_symbol
            out = np.zeros((1, num_symbols))
            idx = np.arange(num_symbols) * r + self.sample_phase
            pos = idx - y.start_index
            ok = (pos >= 0) & (pos < len(y.samples))
            out[0, ok] = np.real(y.samples[pos[ok]])
            return out
        return branch_symbol_outputs(y, self.branches, oks, num_symbols)

    def detect(self, received: np.ndarray, mu: Optional[MuTable] = None) -> np.ndarray:
        if self.kind == VPF_SIGMA:
            return viterbi_sigma(received, self)
        if mu is None:
            raise ConfigurationError(f"{self.kind} requires a trained mu table")
        return viterbi_mu(received, mu)


def eye_sample_phase(ks: KernelSet) -> int:
    """Sampling phase (in samples, 0..R-1) with the largest mean detected
    power for iid symbols: the eye-center convention for the unfiltered
    receiver. Computed from the kernels' symbol-folded power profile."""
    r = ks.samples_per_symbol
    power = np.zeros(r)
    f0 = ks.kernels[0]
    offs = (np.arange(ks.kernel_len) + ks.start_index) % r
    for ph in range(r):
        power[ph] = np.sum(f0[offs == ph] ** 2)
    return int(np.argmax(power))


def build_receiver(
    kind: str,
    constellation: Constellation,
    ks: KernelSet,
    oks: OrthoKernelSet,
    memory: int,
    num_branches: int = 1,
    whitening_taps: int = 15,
) -> ReceiverDesign:
    """Assemble one of the three detector designs around a kernel model."""
    if kind not in DESIGN_KINDS:
        raise ConfigurationError(f"unknown receiver design {kind!r}")
    trellis = TrellisSpec(constellation.size, memory)
    if kind == NOPF_MU:
        phase = eye_sample_phase(ks)
        terms = exact_response_terms(ks, None, None, sample_phase=phase)
        delay = choose_delay(terms, trellis, constellation)
        frac = captured_energy_fraction(terms, delay, trellis, constellation)
        return ReceiverDesign(
            kind=kind,
            constellation=constellation,
            trellis=trellis,
            delay=delay,
            branches=(),
            sample_phase=phase,
            sigma_tables=None,
            captured_fraction=frac,
        )
    branches = tuple(build_branch_filters(oks, num_branches, whitening_taps))
    if kind == VPF_SIGMA:
        tables = []
        delays = []
        term_sets = [sigma_model_terms(oks, br) for br in branches]
        # one shared alignment across branches, chosen on the first branch
        delay = choose_delay(term_sets[0], trellis, constellation)
        for terms in term_sets:
            tables.append(emission_table(terms, delay, trellis, constellation))
        frac = captured_energy_fraction(term_sets[0], delay, trellis, constellation)
        return ReceiverDesign(
            kind=kind,
            constellation=constellation,
            trellis=trellis,
            delay=delay,
            branches=branches,
            sample_phase=0,
            sigma_tables=np.stack(tables),
            captured_fraction=frac,
        )
    # VPF_MU: alignment from the exact branch response
    terms = exact_response_terms(ks, branches[0], oks)
    delay = choose_delay(terms, trellis, constellation)
    frac = captured_energy_fraction(terms, delay, trellis, constellation)
    return ReceiverDesign(
        kind=kind,
        constellation=constellation,
        trellis=trellis,
        delay=delay,
        branches=branches,
        sample_phase=0,
        sigma_tables=None,
        captured_fraction=frac,
    )
