"""DAC-to-optical transfer function: tabulation, ingestion, composition and
application to periodic records."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .waveform import SampledWaveform

DC_FLOOR_DB = -120.0
POINTS_PER_DECADE = 64


class ParseError(ValueError):
    def __init__(self, message: str, row: int, column: int | None = None):
        where = f"row {row}" if column is None else f"row {row}, column {column}"
        super().__init__(f"{where}: {message}")
        self.row = row
        self.column = column


class DuplicateFrequency(ValueError):
    pass


class EmptyTable(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TransferFunction:
    """Tabulated complex response: magnitude in dB, continuous phase in rad.

    Between points magnitude (dB) and phase are interpolated linearly in Hz;
    outside the table the edge values are held.
    """

    freq: np.ndarray
    mag_db: np.ndarray
    phase: np.ndarray
    name: str = ""
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.array(self.freq, dtype=float)
        m = np.array(self.mag_db, dtype=float)
        p = np.array(self.phase, dtype=float)
        if f.ndim != 1 or f.size == 0:
            raise EmptyTable("transfer function needs at least one point")
        if not (f.shape == m.shape == p.shape):
            raise ValueError("freq, mag_db and phase must have equal length")
        if not (np.all(np.isfinite(f)) and np.all(f > 0)):
            raise ValueError("frequencies must be finite and positive")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly ascending")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(p))):
            raise ValueError("magnitude and phase must be finite")
        for a in (f, m, p):
            a.setflags(write=False)
        object.__setattr__(self, "freq", f)
        object.__setattr__(self, "mag_db", m)
        object.__setattr__(self, "phase", p)

    def __len__(self):
        return self.freq.size

    def __call__(self, f):
        return evaluate(self, f)


def flat(gain_db: float = 0.0, name: str = "flat") -> TransferFunction:
    """Frequency-independent response."""
    return TransferFunction([1.0], [gain_db], [0.0], name=name, source="synthetic")


def load_table(source, name: str = "") -> TransferFunction:
    """Parse ``freq_hz,mag_db,phase_rad`` rows.

    ``source`` is a text stream or a string. Blank lines and lines starting
    with ``#`` are skipped; one header row (first non-comment line with a
    non-numeric first field) is allowed.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    rows = []
    first = True
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in line.split(",")]
        if first:
            first = False
            if _is_header(cells):
                continue
        if len(cells) != 3:
            raise ParseError(f"expected 3 columns, found {len(cells)}", lineno)
        values = []
        for col, cell in enumerate(cells, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"not a number: {cell!r}", lineno, col) from None
            if not np.isfinite(v):
                raise ParseError(f"non-finite value {cell!r}", lineno, col)
            values.append(v)
        if values[0] <= 0:
            raise ParseError("frequency must be positive", lineno, 1)
        rows.append((lineno, *values))
    if not rows:
        raise EmptyTable("no data rows")
    rows.sort(key=lambda r: r[1])
    for prev, cur in zip(rows, rows[1:]):
        if cur[1] == prev[1]:
            raise DuplicateFrequency(f"frequency {cur[1]:g} Hz on rows {prev[0]} and {cur[0]}")
    arr = np.array([r[1:] for r in rows])
    src = getattr(source, "name", "") or "stream"
    return TransferFunction(arr[:, 0], arr[:, 1], arr[:, 2], name=name, source=str(src))


def _is_header(cells) -> bool:
    try:
        float(cells[0])
    except ValueError:
        return True
    return False


def dump_table(tf: TransferFunction) -> str:
    lines = ["freq_hz,mag_db,phase_rad"]
    lines += [f"{float(f)!r},{float(m)!r},{float(p)!r}" for f, m, p in zip(tf.freq, tf.mag_db, tf.phase)]
    return "\n".join(lines) + "\n"


def _interp(tf: TransferFunction, f):
    f = np.asarray(f, dtype=float)
    mag = np.interp(f, tf.freq, tf.mag_db)
    ph = np.interp(f, tf.freq, tf.phase)
    return mag, ph


def evaluate(tf: TransferFunction, f):
    """Complex linear-scale response at frequency ``f`` (scalar or array, Hz)."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    mag, ph = _interp(tf, f)
    h = 10 ** (mag / 20) * np.exp(1j * ph)
    return h[()] if h.ndim == 0 else h


def compose(a: TransferFunction, b: TransferFunction, name: str = "") -> TransferFunction:
    """Cascade of ``a`` and ``b`` tabulated on the union of their grids."""
    grid = np.union1d(a.freq, b.freq)
    ma, pa = _interp(a, grid)
    mb, pb = _interp(b, grid)
    return TransferFunction(
        grid, ma + mb, pa + pb, name=name or f"{a.name}*{b.name}", source="composed"
    )


def synth_bandpass(f_lo: float, f_hi: float, order: int = 1) -> TransferFunction:
    """First-order high-pass at ``f_lo`` cascaded with first-order low-pass at
    ``f_hi``, tabulated on a log grid of 64 points per decade.

    The grid starts low enough that the DC-blocked response reaches the
    -120 dB floor, so clamped extrapolation towards DC stays at the floor.
    """
    if not 0 < f_lo < f_hi:
        raise ValueError(f"need 0 < f_lo < f_hi, got {f_lo:g}, {f_hi:g}")
    if order != 1:
        raise ValueError("only first-order sections are supported")
    start = np.floor(np.log10(f_lo)) + DC_FLOOR_DB / 20 - 1
    stop = np.ceil(np.log10(f_hi)) + 3
    n = int(round((stop - start) * POINTS_PER_DECADE)) + 1
    f = np.logspace(start, stop, n)
    s = 1j * f
    h = (s / f_lo) / (1 + s / f_lo) / (1 + s / f_hi)
    mag = np.maximum(20 * np.log10(np.abs(h)), DC_FLOOR_DB)
    phase = np.unwrap(np.angle(h))
    return TransferFunction(
        f, mag, phase, name=f"bandpass:{f_lo:g}:{f_hi:g}", source="synthetic"
    )


def bin_gains(tf: TransferFunction, length: int, f_s: float) -> np.ndarray:
    """Gain applied to each bin of a length-``length`` FFT at rate ``f_s``.

    Positive-frequency bins get H(f), negative ones conj(H(|f|)). DC and,
    for even lengths, the Nyquist bin get Re H so the output stays real.
    """
    k = np.fft.fftfreq(length, d=1.0 / length)
    h = evaluate(tf, np.abs(k) * f_s / length)
    g = np.where(k > 0, h, np.conj(h))
    g[0] = h[0].real
    if length % 2 == 0:
        g[length // 2] = h[length // 2].real
    return g


def apply(tf: TransferFunction, w: SampledWaveform) -> SampledWaveform:
    """Filter a periodic record through ``tf`` in the frequency domain."""
    x = w.samples
    g = bin_gains(tf, x.size, w.f_s)
    y = np.fft.ifft(np.fft.fft(x) * g)
    return SampledWaveform(w.f_s, y.real, w.unit, w.f_fund)
