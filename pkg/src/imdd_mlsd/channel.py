"""Transmitter-to-photodiode chain: Gaussian pulse shaping, chromatic
dispersion as an all-pass quadratic-phase response, optical field
synthesis, and square-law photodetection.

Internal units are strict SI. Constructors that take user-facing units
(nm, ps/nm, ps, GHz) convert once at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .signal import (
    ConfigurationError,
    GridSpec,
    SampledSignal,
    apply_frequency_response,
)

LIGHT_SPEED = 3.0e8  # m/s, fixed by convention of the dispersion response

PULSE_TRUNCATION = 1e-8  # amplitude relative to peak


@dataclass(frozen=True)
class LinkConfig:
    """Physical link parameters in SI units.

    Attributes
    ----------
    wavelength : float
        Optical carrier wavelength [m].
    dispersion : float
        Accumulated chromatic dispersion D*L [s/m]; 0 disables dispersion.
    pulse_width : float
        Gaussian envelope parameter T0 [s] of exp(-t^2 / (2 T0^2)).
    symbol_rate : float
        1/T [Hz].
    samples_per_symbol : int
        Oversampling factor R of the simulation grid.
    """

    wavelength: float
    dispersion: float
    pulse_width: float
    symbol_rate: float
    samples_per_symbol: int = 8

    def __post_init__(self):
        if not (self.wavelength > 0 and self.pulse_width > 0 and self.symbol_rate > 0):
            raise ConfigurationError("wavelength, pulse_width and symbol_rate must be > 0")
        if self.dispersion < 0:
            raise ConfigurationError("dispersion must be >= 0")

    @classmethod
    def from_units(
        cls,
        wavelength_nm: float = 1550.0,
        dispersion_ps_per_nm: float = 600.0,
        pulse_width_ps: float = 36.0,
        symbol_rate_ghz: float = 28.0,
        samples_per_symbol: int = 8,
    ) -> "LinkConfig":
        """Build from the user-facing unit convention."""
        return cls(
            wavelength=wavelength_nm * 1e-9,
            dispersion=dispersion_ps_per_nm * 1e-12 / 1e-9,
            pulse_width=pulse_width_ps * 1e-12,
            symbol_rate=symbol_rate_ghz * 1e9,
            samples_per_symbol=samples_per_symbol,
        )

    @property
    def symbol_period(self) -> float:
        return 1.0 / self.symbol_rate

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.samples_per_symbol, self.symbol_period)

    @property
    def quadratic_phase_coeff(self) -> float:
        """Coefficient of omega^2 in the fiber phase [s^2]."""
        return self.wavelength**2 * self.dispersion / (4.0 * np.pi * LIGHT_SPEED)

    def dispersion_spread_samples(self) -> int:
        """Group-delay spread of the fiber response across the simulated
        band, in samples; used as FFT guard padding."""
        ts = self.grid.sample_period
        omega_max = np.pi / ts
        spread = 2.0 * self.quadratic_phase_coeff * omega_max
        return int(np.ceil(spread / ts)) + 4


@dataclass(frozen=True)
class Constellation:
    """Real non-negative amplitude alphabet with bit mapping.

    OOK maps one bit per symbol onto {0, 1}; PAM4 maps two Gray-coded
    bits onto four equally spaced amplitudes.
    """

    name: str
    levels: np.ndarray
    bits_per_symbol: int
    gray_codes: np.ndarray  # gray_codes[level_index] -> bit pattern as int

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float64)
        lv.flags.writeable = False
        object.__setattr__(self, "levels", lv)
        gc = np.asarray(self.gray_codes, dtype=np.int64)
        gc.flags.writeable = False
        object.__setattr__(self, "gray_codes", gc)

    @property
    def size(self) -> int:
        return len(self.levels)

    def indices_to_amplitudes(self, idx: np.ndarray) -> np.ndarray:
        return self.levels[np.asarray(idx)]

    def random_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.size, size=n)

    def indices_to_bits(self, idx: np.ndarray) -> np.ndarray:
        """Per-symbol bit patterns, MSB first."""
        codes = self.gray_codes[np.asarray(idx)]
        shifts = np.arange(self.bits_per_symbol - 1, -1, -1)
        return ((codes[:, None] >> shifts) & 1).astype(np.int8)

    def bit_errors(self, idx_a: np.ndarray, idx_b: np.ndarray) -> int:
        """Hamming distance between the bit images of two index streams."""
        x = self.gray_codes[np.asarray(idx_a)] ^ self.gray_codes[np.asarray(idx_b)]
        count = np.zeros_like(x)
        for _ in range(self.bits_per_symbol):
            count += x & 1
            x >>= 1
        return int(np.sum(count))


def make_constellation(name: str) -> Constellation:
    key = name.strip().upper().replace("-", "")
    if key == "OOK":
        return Constellation("OOK", np.array([0.0, 1.0]), 1, np.array([0, 1]))
    if key in ("PAM4", "4PAM"):
        # Gray order over amplitude-sorted levels: 00, 01, 11, 10
        return Constellation(
            "PAM4",
            np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]),
            2,
            np.array([0b00, 0b01, 0b11, 0b10]),
        )
    raise ConfigurationError(f"unknown constellation {name!r}")


def shape_pulse(cfg: LinkConfig) -> SampledSignal:
    """Gaussian pulse exp(-t^2/(2 T0^2)) sampled on the grid, truncated
    where the amplitude drops below PULSE_TRUNCATION of the peak."""
    ts = cfg.grid.sample_period
    # exp(-t^2/(2 T0^2)) >= eps  <=>  |t| <= T0*sqrt(2 ln(1/eps))
    n_half = int(np.floor(cfg.pulse_width * np.sqrt(2.0 * np.log(1.0 / PULSE_TRUNCATION)) / ts))
    i = np.arange(-n_half, n_half + 1)
    p = np.exp(-((i * ts) ** 2) / (2.0 * cfg.pulse_width**2))
    return SampledSignal(p, ts, -n_half)


def fiber_response(cfg: LinkConfig):
    """All-pass quadratic-phase frequency response of the dispersive fiber."""
    coeff = cfg.quadratic_phase_coeff

    def response(omega):
        return np.exp(-1j * coeff * np.asarray(omega, dtype=np.float64) ** 2)

    return response


def dispersed_pulse(cfg: LinkConfig) -> SampledSignal:
    """Transmit pulse propagated through the fiber; the complex g(t) that
    generates every Volterra kernel."""
    pulse = shape_pulse(cfg)
    if cfg.dispersion == 0:
        return pulse
    out = apply_frequency_response(pulse, fiber_response(cfg), cfg.dispersion_spread_samples())
    return _trim_small(out, PULSE_TRUNCATION)


def _trim_small(x: SampledSignal, rel: float) -> SampledSignal:
    mag = np.abs(x.samples)
    keep = np.nonzero(mag >= rel * mag.max())[0]
    if len(keep) == 0:
        return x
    lo, hi = keep[0], keep[-1] + 1
    return SampledSignal(x.samples[lo:hi], x.sample_period, x.start_index + lo)


def propagate(symbols: Sequence[float], cfg: LinkConfig) -> SampledSignal:
    """Optical-domain field sum_k a_k g(t - kT) on the simulation grid."""
    a = np.asarray(symbols, dtype=np.float64)
    g = dispersed_pulse(cfg)
    r = cfg.samples_per_symbol
    up = np.zeros((len(a) - 1) * r + 1, dtype=np.float64)
    up[::r] = a
    train = SampledSignal(up, cfg.grid.sample_period, 0)
    from .signal import convolve

    return convolve(train, g)


def photodetect(field: SampledSignal) -> SampledSignal:
    """Square-law detection: |field|^2, real and non-negative."""
    return SampledSignal(
        np.abs(field.samples) ** 2, field.sample_period, field.start_index
    )
