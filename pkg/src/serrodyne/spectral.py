"""Optical spectrum of phase-modulated light and frequency-shift quality.

The field is modelled as ``exp(i * a * phi(t))`` on a coherent periodic
record, so its discrete spectrum is exact (no leakage) and conserves power.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rf_chain
from .rf_chain import TransferFunction
from .waveform import SampledWaveform, SawtoothSpec, interpolate, sample_ideal

DEFAULT_PERIODS = 32
DEFAULT_MIN_SAMPLES = 8192
DEFAULT_OVERSAMPLE = 8
COARSE_STEP = 0.02
REFINE_TOL = 1e-4

SWEEP_COLUMNS = ("f_m_hz", "N", "a_star", "conversion_loss_db", "suppression_db", "spur_offset_hz")
SCHEMA_VERSION = 1


class NonCoherentRecord(ValueError):
    pass


class TargetOffGrid(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OpticalSpectrum:
    """Relative power per bin, carrier-centred, summing to one."""

    f_bin: np.ndarray
    power: np.ndarray

    @property
    def df(self) -> float:
        return float(self.f_bin[1] - self.f_bin[0])

    def index_of(self, f: float) -> int:
        df = self.df
        i = int(round((f - self.f_bin[0]) / df))
        if not 0 <= i < self.f_bin.size:
            raise TargetOffGrid(
                f"{f:g} Hz outside spectrum span [{self.f_bin[0]:g}, {self.f_bin[-1]:g}] Hz"
            )
        return i

    def power_at(self, f: float) -> float:
        return float(self.power[self.index_of(f)])


@dataclass(frozen=True)
class ShiftMetrics:
    target_hz: float
    conversion_loss_db: float
    suppression_db: float
    spur_offset_hz: float
    insertion_loss_db: float | None = None

    @property
    def suppression_unbounded(self) -> bool:
        return math.isinf(self.suppression_db)

    @property
    def shifted_power(self) -> float:
        return 10 ** (-self.conversion_loss_db / 10)


@dataclass(frozen=True)
class SweepRow:
    f_m: float
    n: int
    a_star: float
    metrics: ShiftMetrics | None
    f_requested: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def modulate(phi: SampledWaveform, scale: float = 1.0) -> OpticalSpectrum:
    """Power spectrum of ``exp(i * scale * phi)``."""
    n = len(phi)
    if n < 4:
        raise NonCoherentRecord(f"record of {n} samples is too short (need >= 4)")
    periods = phi.n_periods
    if periods is not None and abs(periods - round(periods)) > 1e-9 * max(periods, 1.0):
        raise NonCoherentRecord(f"record holds {periods!r} ramp periods")
    field = np.exp(1j * scale * phi.samples)
    p = np.abs(np.fft.fft(field)) ** 2 / n**2
    p /= p.sum()
    f = np.fft.fftfreq(n, d=1.0 / phi.f_s)
    return OpticalSpectrum(np.fft.fftshift(f), np.fft.fftshift(p))


def sideband_power_analytic(amplitude: float, k: int) -> float:
    """Relative power in order ``k`` for an ideal sawtooth of total swing
    ``amplitude`` cycles (``a * N``): sinc^2(amplitude - k)."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    return float(np.sinc(amplitude - k) ** 2)


def metrics(
    s: OpticalSpectrum,
    target_hz: float,
    exclusion_bins: int = 1,
    insertion_loss_db: float | None = None,
) -> ShiftMetrics:
    """Conversion loss and suppression for a shift to ``target_hz``.

    The spur search skips the target bin and ``exclusion_bins`` bins on
    each side of it.
    """
    it = s.index_of(target_hz)
    p_shift = float(s.power[it])
    masked = s.power.copy()
    masked[max(it - exclusion_bins, 0) : it + exclusion_bins + 1] = -1.0
    j = int(np.argmax(masked))
    p_spur = float(max(masked[j], 0.0))
    loss = -10 * math.log10(p_shift) if p_shift > 0 else math.inf
    if p_spur == 0:
        sup = math.inf
    elif p_shift == 0:
        sup = -math.inf
    else:
        sup = 10 * math.log10(p_shift / p_spur)
    return ShiftMetrics(
        target_hz=float(s.f_bin[it]),
        conversion_loss_db=loss if loss > 0 else 0.0,
        suppression_db=sup,
        spur_offset_hz=float(s.f_bin[j]),
        insertion_loss_db=insertion_loss_db,
    )


# --- amplitude optimisation ------------------------------------------------


def drive_phase(
    spec: SawtoothSpec,
    tf: TransferFunction,
    f_s: float,
    n_periods: int,
    oversample: int = DEFAULT_OVERSAMPLE,
    kind: str = "linear",
) -> SampledWaveform:
    """Optical phase at the EOM for unit drive amplitude.

    The sawtooth is point-sampled at ``f_s``, reconstructed on a grid
    ``oversample`` times finer and filtered by ``tf``. ``oversample=1``
    skips reconstruction and keeps the bare point samples. ``spec.a`` is
    ignored; the amplitude enters later as the ``scale`` of :func:`modulate`.
    """
    unit = SawtoothSpec(spec.f_m, spec.n, spec.v_pi, 1.0)
    s = sample_ideal(unit, f_s, n_periods)
    if oversample != 1:
        s = interpolate(s, oversample, kind)
    return rf_chain.apply(tf, s)


class TargetPower:
    """Power in DFT bin ``target_bin`` of ``exp(i * a * phi)`` as a function of ``a``."""

    def __init__(self, phi: SampledWaveform, target_bin: int):
        self.x = phi.samples
        n = self.x.size
        self.kern = np.exp(-2j * np.pi * ((target_bin * np.arange(n)) % n) / n)

    def __call__(self, a: float) -> float:
        return abs(np.dot(np.exp(1j * a * self.x), self.kern) / self.x.size) ** 2

    def on_grid(self, lo: float, step: float, count: int) -> np.ndarray:
        """Values on ``lo + step * j`` for ``j < count``, stepping the field by
        repeated multiplication with ``exp(i * step * phi)``."""
        field = np.exp(1j * lo * self.x) * self.kern
        rot = np.exp(1j * step * self.x)
        out = np.empty(count)
        for j in range(count):
            if j:
                field *= rot
            out[j] = abs(field.sum() / self.x.size) ** 2
        return out


def target_power(phi: SampledWaveform, target_bin: int, scales) -> np.ndarray:
    tp = TargetPower(phi, target_bin)
    return np.array([tp(a) for a in np.atleast_1d(scales)])


def golden_section(f, lo: float, hi: float, tol: float = REFINE_TOL):
    """Minimise a unimodal ``f`` on [lo, hi] until the bracket is below ``tol``."""
    invphi = (math.sqrt(5) - 1) / 2
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = f(x2)
    return (float(x1), f1) if f1 <= f2 else (float(x2), f2)


def _loss_db(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return -10 * np.log10(p)


def amplitude_bracket(spec: SawtoothSpec, tf: TransferFunction) -> tuple[float, float, float]:
    """Coarse-scan range and step, widened by the chain loss at ``f_m``."""
    gain = abs(rf_chain.evaluate(tf, spec.f_m))
    scale = 1.0 / gain if gain > 0 else 1.0
    return 0.5 * scale, 1.5 * spec.n * scale, COARSE_STEP * scale


def optimize_amplitude(
    spec: SawtoothSpec,
    tf: TransferFunction,
    f_s: float,
    n_periods: int,
    oversample: int = DEFAULT_OVERSAMPLE,
    kind: str = "linear",
    exclusion_bins: int = 1,
) -> tuple[float, ShiftMetrics]:
    """Drive amplitude minimising conversion loss, and the metrics there.

    Coarse scan at step 0.02 over [0.5, 1.5 N] (divided by the chain gain at
    ``f_m``), then golden-section refinement around the best grid point.
    """
    phi = drive_phase(spec, tf, f_s, n_periods, oversample, kind)
    a_star, _ = best_amplitude(phi, spec.n * n_periods, *amplitude_bracket(spec, tf))
    s = modulate(phi, a_star)
    return a_star, metrics(s, spec.target_hz, exclusion_bins)


def best_amplitude(phi: SampledWaveform, target_bin: int, lo: float, hi: float, step: float):
    """Coarse grid scan then golden-section refinement; returns (a, loss_db)."""
    tp = TargetPower(phi, target_bin)
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    i = int(np.argmax(tp.on_grid(lo, step, count)))
    left = lo + step * max(i - 1, 0)
    right = lo + step * min(i + 1, count - 1)
    return golden_section(lambda a: float(_loss_db(tp(a))), left, right)


# --- sweeps ----------------------------------------------------------------


def snap_frequency(
    f_m: float,
    f_s: float,
    periods: int = DEFAULT_PERIODS,
    min_samples: int = DEFAULT_MIN_SAMPLES,
) -> tuple[float, int]:
    """Nearest frequency giving a coherent record; returns (f_snapped, n_periods).

    The record holds at least ``periods`` ramps and ``min_samples`` samples.
    """
    if not 0 < f_m < f_s / 2:
        raise ValueError(f"f_m={f_m:g} must lie in (0, f_s/2) with f_s={f_s:g}")
    n = max(periods, math.ceil(min_samples * f_m / f_s))
    length = max(round(n * f_s / f_m), 2 * n + 1)
    return n * f_s / length, n


def sweep(
    f_list,
    n: int,
    tf: TransferFunction,
    f_s: float,
    periods: int = DEFAULT_PERIODS,
    min_samples: int = DEFAULT_MIN_SAMPLES,
    oversample: int = DEFAULT_OVERSAMPLE,
    kind: str = "linear",
    exclusion_bins: int = 1,
    max_workers: int | None = None,
) -> list[SweepRow]:
    """Optimised performance at each requested ramp frequency.

    Frequencies are snapped to coherent values (reported in ``f_m``, with
    the request kept in ``f_requested``). A failing row carries an
    ``error`` message and the sweep carries on.
    """

    def one(f_req):
        try:
            f_m, n_periods = snap_frequency(f_req, f_s, periods, min_samples)
            spec = SawtoothSpec(f_m, n)
            a_star, m = optimize_amplitude(spec, tf, f_s, n_periods, oversample, kind, exclusion_bins)
            return SweepRow(f_m, n, a_star, m, f_requested=f_req)
        except (ValueError, ArithmeticError) as exc:
            return SweepRow(f_req, n, math.nan, None, f_requested=f_req, error=str(exc))

    f_list = [float(f) for f in f_list]
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            return list(pool.map(one, f_list))
    return [one(f) for f in f_list]


def extract_bands(rows, loss_below: float | None = None, suppression_above: float | None = None):
    """Maximal runs of consecutive rows meeting the predicate, widest first.

    Exactly one of ``loss_below`` / ``suppression_above`` must be given.
    Returns ``[(f_start, f_end), ...]`` using the run's end-row frequencies.
    """
    if (loss_below is None) == (suppression_above is None):
        raise ValueError("give exactly one of loss_below, suppression_above")

    def passes(row):
        if row.metrics is None:
            return False
        if loss_below is not None:
            return row.metrics.conversion_loss_db < loss_below
        return row.metrics.suppression_db > suppression_above

    bands = []
    start = None
    for i, row in enumerate(rows):
        if passes(row):
            if start is None:
                start = i
        elif start is not None:
            bands.append((rows[start].f_m, rows[i - 1].f_m))
            start = None
    if start is not None:
        bands.append((rows[start].f_m, rows[-1].f_m))
    # stable sort keeps low-frequency bands first among equal widths
    return sorted(bands, key=lambda b: b[0] - b[1])


# --- tabular I/O -------------------------------------------------------------


def format_sweep_table(rows, footer=()) -> str:
    out = io.StringIO()
    out.write(f"# schema={SCHEMA_VERSION}\n")
    out.write("# " + ",".join(SWEEP_COLUMNS) + "\n")
    for r in rows:
        if r.metrics is None:
            out.write(f"# error f_m_hz={float(r.f_m)!r}: {r.error}\n")
            continue
        m = r.metrics
        out.write(
            f"{float(r.f_m)!r},{r.n},{float(r.a_star)!r},{float(m.conversion_loss_db)!r},"
            f"{float(m.suppression_db)!r},{float(m.spur_offset_hz)!r}\n"
        )
    for line in footer:
        out.write(f"# {line}\n")
    return out.getvalue()


def parse_sweep_table(text: str) -> list[SweepRow]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = line.split(",")
        if len(cells) != len(SWEEP_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(SWEEP_COLUMNS)} columns")
        f_m, n, a, loss, sup, spur = cells
        m = ShiftMetrics(int(n) * float(f_m), float(loss), float(sup), float(spur))
        rows.append(SweepRow(float(f_m), int(n), float(a), m))
    return rows
