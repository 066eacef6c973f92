"""Serrodyne drive waveforms.

Three levels of realism are provided:

* the ideal continuous sawtooth (:func:`ideal_phase`),
* the sample-rate-limited ramp, i.e. point samples of the ideal sawtooth
  (:func:`sample_ideal`) reconstructed by interpolation (:func:`interpolate`),
* a bit-accurate model of the FPGA ramp generator feeding the DAC
  (:func:`rampgen_emulate`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

ACC_BITS = 32
GAIN_BITS = 16
PRODUCT_BITS = 48
ACC_MOD = 1 << ACC_BITS


class NonCommensurate(ValueError):
    """Record does not hold an integer number of ramp periods."""


class OutOfRange(ValueError):
    """Frequency or register value outside its representable range."""


@dataclass(frozen=True)
class SawtoothSpec:
    """Drive ramp parameters.

    ``a`` scales the drive; ``a = 1`` gives a peak-to-peak optical phase
    of ``2*pi*N`` rad, i.e. a voltage swing of ``2*N*v_pi``.
    """

    f_m: float
    n: int = 1
    v_pi: float = 1.6
    a: float = 1.0

    def __post_init__(self):
        if not self.f_m > 0:
            raise ValueError(f"f_m must be positive, got {self.f_m}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"shift index N must be a positive integer, got {self.n}")
        if not self.v_pi > 0:
            raise ValueError(f"v_pi must be positive, got {self.v_pi}")
        if not self.a >= 0:
            raise ValueError(f"amplitude scale must be non-negative, got {self.a}")

    @property
    def target_hz(self) -> float:
        return self.n * self.f_m


@dataclass(frozen=True, eq=False)
class SampledWaveform:
    """Uniformly sampled real signal.

    ``unit`` is a free tag ("rad", "V", "norm"). ``f_fund`` is the ramp
    frequency when the record is known to be periodic; spectral code uses
    it to check coherence.
    """

    f_s: float
    samples: np.ndarray
    unit: str = "rad"
    f_fund: float | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=float)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("waveform needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform samples must be finite")
        if not self.f_s > 0:
            raise ValueError(f"sample rate must be positive, got {self.f_s}")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.f_s

    @property
    def n_periods(self) -> float | None:
        if self.f_fund is None:
            return None
        return self.samples.size * self.f_fund / self.f_s

    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.f_s

    def scaled(self, factor: float) -> SampledWaveform:
        return SampledWaveform(self.f_s, factor * self.samples, self.unit, self.f_fund)


def ideal_phase(spec: SawtoothSpec, t):
    """Optical phase (rad) of the ideal sawtooth drive at time(s) ``t``."""
    x = np.mod(spec.f_m * np.asarray(t, dtype=float), 1.0)
    return spec.a * 2 * np.pi * spec.n * (x - 0.5)


def ideal_voltage(spec: SawtoothSpec, t):
    """Drive voltage; phase = pi * V / v_pi."""
    return ideal_phase(spec, t) * spec.v_pi / np.pi


def record_length(f_m: float, f_s: float, n_periods: int) -> int:
    """Samples in a coherent record of ``n_periods`` ramps.

    Raises NonCommensurate when ``n_periods * f_s / f_m`` is not an
    integer (relative tolerance 1e-9).
    """
    exact = n_periods * f_s / f_m
    length = round(exact)
    if length < 1 or abs(exact - length) > 1e-9 * exact:
        raise NonCommensurate(
            f"{n_periods} periods of {f_m:g} Hz at {f_s:g} Sa/s is {exact!r} samples, not an integer"
        )
    return length


def sample_ideal(spec: SawtoothSpec, f_s: float, n_periods: int) -> SampledWaveform:
    """Point-sample the ideal sawtooth at ``k / f_s`` over a coherent record."""
    if not 0 < spec.f_m < f_s / 2:
        raise OutOfRange(f"f_m={spec.f_m:g} must lie in (0, f_s/2) with f_s={f_s:g}")
    if n_periods < 1:
        raise ValueError("n_periods must be >= 1")
    length = record_length(spec.f_m, f_s, n_periods)
    # f_m / f_s == n_periods / length exactly, so ramp position is a ratio of ints
    k = np.arange(length, dtype=np.int64)
    frac = ((k * n_periods) % length) / length
    phase = spec.a * 2 * np.pi * spec.n * (frac - 0.5)
    return SampledWaveform(f_s, phase, "rad", f_fund=spec.f_m)


def interpolate(w: SampledWaveform, oversample: int, kind: str = "linear") -> SampledWaveform:
    """Reconstruct a periodic record on a grid ``oversample`` times finer.

    ``kind="linear"`` joins consecutive samples (the last one back to the
    first) with straight lines, so the flyback takes exactly one sample
    interval. ``kind="zoh"`` holds each sample.
    """
    if int(oversample) != oversample or oversample < 2:
        raise ValueError(f"oversample must be an integer >= 2, got {oversample}")
    oversample = int(oversample)
    x = w.samples
    if kind == "linear":
        step = np.roll(x, -1) - x
        frac = np.arange(oversample) / oversample
        y = (x[:, None] + step[:, None] * frac[None, :]).ravel()
    elif kind == "zoh":
        y = np.repeat(x, oversample)
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    return SampledWaveform(w.f_s * oversample, y, w.unit, w.f_fund)


# --- ramp generator (DDS) -------------------------------------------------


@dataclass(frozen=True)
class RampGenConfig:
    inc: int
    g: int
    lanes: int = 16
    dac_bits: int = 14
    f_s: float = 9.85e9
    acc0: int = 0

    def __post_init__(self):
        if not 0 < self.inc < ACC_MOD:
            raise OutOfRange(f"inc={self.inc} outside (0, 2^32)")
        if not 0 <= self.g < (1 << GAIN_BITS):
            raise OutOfRange(f"g={self.g} outside [0, 2^16)")
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")
        if not 1 <= self.dac_bits <= 16:
            raise OutOfRange(f"dac_bits={self.dac_bits} outside [1, 16]")
        if not 0 <= self.acc0 < ACC_MOD:
            raise OutOfRange(f"acc0={self.acc0} outside [0, 2^32)")
        if not self.f_s > 0:
            raise ValueError("f_s must be positive")

    @property
    def f_m(self) -> float:
        return inc_to_freq(self.inc, self.f_s)


def freq_to_inc(f_m: float, f_s: float) -> int:
    """Phase increment register for a ramp at ``f_m``: round(f_m/f_s * 2^32)."""
    if not (f_s > 0 and 0 < f_m < f_s / 2):
        raise OutOfRange(f"f_m={f_m:g} must lie in (0, f_s/2) with f_s={f_s:g}")
    return round(Fraction(f_m) / Fraction(f_s) * ACC_MOD)


def inc_to_freq(inc: int, f_s: float) -> float:
    return inc * f_s / ACC_MOD


def amplitude_to_gain(amplitude: float) -> int:
    """Gain register for a normalized amplitude in [0, 1]; 1 maps to full scale."""
    if not 0 <= amplitude <= 1:
        raise OutOfRange(f"amplitude {amplitude} outside [0, 1]")
    return min(round(amplitude * (1 << GAIN_BITS)), (1 << GAIN_BITS) - 1)


def accumulator(cfg: RampGenConfig, n_samples: int, parallel: bool = True) -> np.ndarray:
    """Accumulator values for the first ``n_samples`` DAC samples.

    With ``parallel`` the hardware structure is followed: ``cfg.lanes``
    registers seeded ``inc`` apart, each advancing by ``lanes * inc`` per
    fabric clock. Otherwise a single register advances by ``inc``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not parallel:
        k = np.arange(n_samples, dtype=np.uint64)
        # uint64 products wrap mod 2^64, which 2^32 divides
        return (np.uint64(cfg.acc0) + k * np.uint64(cfg.inc)) % np.uint64(ACC_MOD)
    lanes = cfg.lanes
    n_clocks = -(-n_samples // lanes)
    seed = (cfg.acc0 + np.arange(lanes, dtype=np.uint64) * np.uint64(cfg.inc)) % np.uint64(ACC_MOD)
    step = np.full(n_clocks, (lanes * cfg.inc) % ACC_MOD, dtype=np.uint64)
    step[0] = 0
    advance = np.cumsum(step, dtype=np.uint64)
    regs = (seed[None, :] + advance[:, None]) % np.uint64(ACC_MOD)
    return regs.ravel()[:n_samples]


def rampgen_codes(cfg: RampGenConfig, n_samples: int, parallel: bool = True) -> np.ndarray:
    """Signed DAC codes: MSBs of the 48-bit product (acc - 2^31) * g."""
    acc = accumulator(cfg, n_samples, parallel).astype(np.int64)
    product = (acc - (1 << (ACC_BITS - 1))) * np.int64(cfg.g)
    return product >> (PRODUCT_BITS - cfg.dac_bits)


def rampgen_emulate(cfg: RampGenConfig, n_samples: int, parallel: bool = True) -> SampledWaveform:
    """Emulated DAC output normalized to [-1, 1)."""
    codes = rampgen_codes(cfg, n_samples, parallel)
    values = codes / float(1 << (cfg.dac_bits - 1))
    return SampledWaveform(cfg.f_s, values, "norm", f_fund=cfg.f_m)


def coherent_ramp_length(inc: int) -> int:
    """Samples after which the accumulator returns to its seed."""
    return ACC_MOD // math.gcd(inc, ACC_MOD)
