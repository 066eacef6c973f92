"""Misaligned Fabry-Perot cavity, PDH error signal, and the lock-point shift
caused by unwanted features of an offset laser.

Frequencies are in Hz. Laser features are placed relative to the cavity
mode the lock targets (TEM00 of FSR order q=0).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import optimize, special

C_LIGHT = 299_792_458.0
WINDOW_LINEWIDTHS = 20.0
TAIL_LINEWIDTHS = 10.0
BISECT_TOL = 1e-6
LOCK_COLUMNS = ("f_m_hz", "dxi_hz", "dxi_over_linewidth")
SCHEMA_VERSION = 1


class UnstableCavity(ValueError):
    pass


class NoLockPoint(ArithmeticError):
    pass


class F1OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class CavityModel:
    """Two-mirror cavity with transverse-mode contrasts.

    ``contrasts`` maps transverse order k (>= 1) to C_k = V00 / V_k. Orders
    missing from the map do not couple at all.
    """

    d: float
    r1: float = math.inf
    r2: float = math.inf
    linewidth: float = 200e3
    contrasts: Mapping[int, float] = field(default_factory=lambda: {1: 30.0, 2: 15.0})

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"cavity length must be positive, got {self.d}")
        if not self.linewidth > 0:
            raise ValueError(f"linewidth must be positive, got {self.linewidth}")
        for k, c in self.contrasts.items():
            if int(k) != k or k < 1:
                raise ValueError(f"transverse order must be a positive integer, got {k}")
            if not c >= 1:
                raise ValueError(f"contrast C_{k}={c} must be >= 1")
        g = self.g_product
        if not 0 <= g <= 1:
            raise UnstableCavity(
                f"d={self.d} m, R1={self.r1} m, R2={self.r2} m: g1*g2={g:.6g} outside [0, 1]"
            )

    @property
    def g_product(self) -> float:
        return (1 - self.d / self.r1) * (1 - self.d / self.r2)

    @property
    def fsr(self) -> float:
        return C_LIGHT / (2 * self.d)

    @property
    def nu_h(self) -> float:
        return higher_order_mode_offset(self)

    def coupling(self, k: int) -> float:
        """Relative PD signal of order ``k`` modes; 0 when not coupled."""
        if k == 0:
            return 1.0
        c = self.contrasts.get(k)
        return 0.0 if c is None else 1.0 / c

    def orders(self) -> list[int]:
        return [0] + sorted(int(k) for k in self.contrasts)

    def mode_frequency(self, q: int, k: int) -> float:
        return q * self.fsr + k * self.nu_h

    def report(self) -> str:
        """Plain-text summary: FSR, transverse spacing and the first modes."""
        lines = [
            f"d_m={self.d!r}",
            f"r1_m={self.r1!r}",
            f"r2_m={self.r2!r}",
            f"linewidth_hz={self.linewidth!r}",
            f"fsr_hz={self.fsr!r}",
            f"nu_h_hz={self.nu_h!r}",
            "mode q k offset_hz coupling",
        ]
        for q in (0, 1):
            for k in self.orders():
                lines.append(f"mode {q} {k} {self.mode_frequency(q, k)!r} {self.coupling(k)!r}")
        return "\n".join(lines) + "\n"


def higher_order_mode_offset(cavity: CavityModel) -> float:
    """Transverse-mode spacing nu_h = (FSR / pi) * arccos(sqrt(g1 * g2))."""
    g = cavity.g_product
    if not 0 <= g <= 1:
        raise UnstableCavity(f"g1*g2={g:.6g} outside [0, 1]")
    return cavity.fsr / math.pi * math.acos(math.sqrt(g))


def lorentzian(x, center, linewidth):
    return 1.0 / (1.0 + ((np.asarray(x) - center) / (linewidth / 2)) ** 2)


def transmission_spectrum(cavity: CavityModel, v00: float, xi) -> np.ndarray:
    """Transmitted PD voltage when a probe at detuning ``xi`` is scanned.

    Sums TEM00 and coupled transverse orders over every FSR whose modes fall
    inside the span of ``xi`` padded by 10 linewidths.
    """
    xi = np.asarray(xi, dtype=float)
    pad = TAIL_LINEWIDTHS * cavity.linewidth
    lo, hi = xi.min() - pad, xi.max() + pad
    fsr, nu_h = cavity.fsr, cavity.nu_h
    out = np.zeros_like(xi)
    for k in cavity.orders():
        w = cavity.coupling(k)
        q_lo = math.ceil((lo - k * nu_h) / fsr)
        q_hi = math.floor((hi - k * nu_h) / fsr)
        for q in range(q_lo, q_hi + 1):
            out += w * lorentzian(xi, q * fsr + k * nu_h, cavity.linewidth)
    return v00 * out


# --- PDH error signal --------------------------------------------------------


@dataclass(frozen=True)
class PdhConfig:
    mod_freq: float = 25e6
    depth: float = 1.082
    linewidth: float = 200e3

    def __post_init__(self):
        if not self.mod_freq > 0:
            raise ValueError("PDH modulation frequency must be positive")
        if not self.depth > 0:
            raise ValueError("PDH modulation depth must be positive")
        if not self.linewidth > 0:
            raise ValueError("linewidth must be positive")

    @property
    def carrier_sideband(self) -> float:
        return float(special.j0(self.depth) * special.j1(self.depth))


def max_slope_depth() -> float:
    """Modulation depth maximising J0(beta) * J1(beta), hence the error slope."""
    res = optimize.minimize_scalar(
        lambda b: -special.j0(b) * special.j1(b), bounds=(0.1, 2.4), method="bounded",
        options={"xatol": 1e-10},
    )
    return float(res.x)


def reflection(delta, linewidth):
    """Near-resonance cavity reflection coefficient F(delta)."""
    x = np.asarray(delta, dtype=float) / (linewidth / 2)
    return 1j * x / (1 + 1j * x)


def error_signal(delta, cfg: PdhConfig):
    """PDH error at laser-mode detuning ``delta`` (units of the carrier-sideband
    product; positive slope through zero)."""
    omega = cfg.mod_freq
    lw = cfg.linewidth
    f0 = reflection(delta, lw)
    up = reflection(np.asarray(delta) + omega, lw)
    down = reflection(np.asarray(delta) - omega, lw)
    return cfg.carrier_sideband * np.imag(f0 * np.conj(up) - np.conj(f0) * down)


def error_slope(cfg: PdhConfig) -> float:
    """d(error)/d(delta) at delta = 0, per Hz."""
    gamma = cfg.linewidth / 2
    return float(cfg.carrier_sideband * 2 / gamma * np.real(reflection(cfg.mod_freq, cfg.linewidth)))


def pdh_error(delta, cfg: PdhConfig, fsr: float | None = None):
    """Error signal at ``delta`` together with the lock slope k_e."""
    if fsr is not None and np.any(np.abs(delta) >= fsr / 2):
        raise ValueError("detuning must lie within half a free spectral range")
    return error_signal(delta, cfg), error_slope(cfg)


def lock_shift_worst_case(contrast: float, power_ratio: float, linewidth: float) -> float:
    """Largest lock shift from one spur sitting half a linewidth off a mode of
    contrast ``contrast``: (P'/P00) * linewidth / (2 * C)."""
    if not contrast >= 1:
        raise ValueError("contrast must be >= 1")
    if not power_ratio >= 0:
        raise ValueError("power ratio must be non-negative")
    if not linewidth > 0:
        raise ValueError("linewidth must be positive")
    return power_ratio / contrast * linewidth / 2


# --- offset laser spectra ------------------------------------------------------


@dataclass(frozen=True)
class LaserSpectrumModel:
    """Discrete laser features as (offset from lock target in units of f_m,
    power relative to the target feature)."""

    features: tuple
    name: str = ""

    def __post_init__(self):
        feats = tuple((float(o), float(p)) for o, p in self.features)
        if any(p < 0 for _, p in feats):
            raise ValueError("feature powers must be non-negative")
        target = [p for o, p in feats if o == 0]
        if len(target) != 1 or not math.isclose(target[0], 1.0, rel_tol=1e-12):
            raise ValueError("need exactly one target feature at offset 0 with power 1")
        object.__setattr__(self, "features", feats)

    def power(self, offset: float) -> float:
        return sum(p for o, p in self.features if o == offset)

    def spurs(self):
        return [(o, p) for o, p in self.features if o != 0]

    def scaled_spurs(self, s: float) -> LaserSpectrumModel:
        return LaserSpectrumModel(
            tuple((o, p if o == 0 else s * p) for o, p in self.features), self.name
        )


def db_to_ratio(db: float) -> float:
    return 10 ** (db / 10)


def serrodyne_measured() -> LaserSpectrumModel:
    """Serrodyne +1 lock: features 0 and +2 at -13 dB, -1 and +3 at -16 dB."""
    p13, p16 = db_to_ratio(-13), db_to_ratio(-16)
    # serrodyne orders -1, 0, +1, +2, +3 sit at offsets -2..+2 from the +1 target
    return LaserSpectrumModel(
        ((-2, p16), (-1, p13), (0, 1.0), (1, p13), (2, p16)), name="serrodyne"
    )


def target_only() -> LaserSpectrumModel:
    return LaserSpectrumModel(((0, 1.0),), name="target")


def dsb_spectrum(beta: float) -> LaserSpectrumModel:
    """Single-tone phase modulation, locked to the +1 sideband.

    Orders -2..+2 with power J_k(beta)^2, normalized to order +1.
    """
    if not beta > 0:
        raise ValueError("modulation depth must be positive")
    p1 = special.jv(1, beta) ** 2
    feats = tuple((k - 1, float(special.jv(k, beta) ** 2 / p1)) for k in range(-2, 3))
    return LaserSpectrumModel(feats, name=f"dsb:{beta:g}")


# --- lock-shift sweep ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LockShiftCurve:
    f_m: np.ndarray
    dxi: np.ndarray
    linewidth: float
    pairs: list
    errors: list

    @property
    def dxi_over_linewidth(self) -> np.ndarray:
        return self.dxi / self.linewidth


def _interactions(f_m: np.ndarray, cavity: CavityModel, laser: LaserSpectrumModel, window: float):
    """Active (row, weight, detuning, label) tuples for every laser feature
    within ``window`` of a coupled cavity mode."""
    fsr, nu_h = cavity.fsr, cavity.nu_h
    rows, weights, detunings, labels = [], [], [], []
    for offset, power in laser.features:
        if power == 0:
            continue
        x = offset * f_m
        for k in cavity.orders():
            w = cavity.coupling(k)
            q0 = np.floor((x - k * nu_h) / fsr).astype(np.int64)
            for q in (q0, q0 + 1):
                det = x - (q * fsr + k * nu_h)
                hit = np.flatnonzero(np.abs(det) <= window)
                for i in hit:
                    rows.append(i)
                    weights.append(power * w)
                    detunings.append(det[i])
                    labels.append((offset, int(q[i]), k))
    return np.array(rows, dtype=np.int64), np.array(weights), np.array(detunings), labels


def lock_shift_sweep(
    f_m,
    cavity: CavityModel,
    laser: LaserSpectrumModel,
    cfg: PdhConfig | None = None,
    window_linewidths: float = WINDOW_LINEWIDTHS,
) -> LockShiftCurve:
    """Lock-point shift of a PDH lock on the target feature versus ``f_m``.

    The total error is the sum over (feature, mode) pairs within the
    interaction window of ``(P_f * coupling) * error(detuning + shift)``.
    Its root in [-linewidth/2, +linewidth/2] is found by bisection. Rows
    without a sign change get NaN and an entry in ``errors``.
    """
    f_m = np.atleast_1d(np.asarray(f_m, dtype=float))
    if cfg is None:
        cfg = PdhConfig(linewidth=cavity.linewidth)
    lw = cfg.linewidth
    window = window_linewidths * lw
    rows, weights, dets, labels = _interactions(f_m, cavity, laser, window)

    pairs = [[] for _ in range(f_m.size)]
    for r, lab in zip(rows, labels):
        pairs[r].append(lab)
    dxi = np.zeros(f_m.size)
    errors = []
    # rows where only the target's own mode is active keep dxi = 0
    spur = np.array([lab != (0.0, 0, 0) for lab in labels], dtype=bool)
    active = np.unique(rows[spur]) if rows.size else np.array([], dtype=np.int64)
    if active.size:
        index = {r: i for i, r in enumerate(active)}
        width = max(len(pairs[r]) for r in active)
        w = np.zeros((active.size, width))
        d = np.zeros((active.size, width))
        fill = np.zeros(active.size, dtype=np.int64)
        for r, wt, dt in zip(rows, weights, dets):
            i = index.get(r)
            if i is None:
                continue
            w[i, fill[i]] = wt
            d[i, fill[i]] = dt
            fill[i] += 1

        def total(shift):
            return np.sum(w * error_signal(d + shift[:, None], cfg), axis=1)

        root, ok = _bisect(total, -lw / 2, lw / 2, BISECT_TOL * lw, active.size)
        dxi[active] = np.where(ok, root, np.nan)
        for i in np.flatnonzero(~ok):
            errors.append((float(f_m[active[i]]), "no lock point within half a linewidth"))
    return LockShiftCurve(f_m, dxi, lw, pairs, errors)


def _bisect(fn, lo: float, hi: float, tol: float, n: int):
    """Vectorised bisection of ``n`` independent functions on a shared bracket."""
    a = np.full(n, lo)
    b = np.full(n, hi)
    fa = fn(a)
    fb = fn(b)
    ok = np.sign(fa) * np.sign(fb) <= 0
    done = (fa == 0) | (fb == 0)
    root = np.where(fa == 0, a, np.where(fb == 0, b, 0.0))
    while True:
        m = 0.5 * (a + b)
        fm = fn(m)
        hit = (fm == 0) & ~done
        root = np.where(hit, m, root)
        done |= hit
        left = np.sign(fa) * np.sign(fm) < 0
        b = np.where(left, m, b)
        a = np.where(left, a, m)
        fa = np.where(left, fa, fm)
        if np.max(b - a) <= tol:
            break
    root = np.where(done, root, 0.5 * (a + b))
    return root, ok


def dynamic_range(rows, f1: float):
    """Highest offset ``f2`` before the shifted power halves relative to ``f1``.

    ``rows`` are sweep rows sorted by ``f_m``. Returns ``(f2, reached)``;
    when the power never halves, ``f2`` is the last row frequency and
    ``reached`` is False.
    """
    good = [r for r in rows if r.metrics is not None]
    if len(good) < 2:
        raise F1OutOfRange("need at least two valid sweep rows")
    f = np.array([r.f_m for r in good])
    p = np.array([r.metrics.shifted_power for r in good])
    if not f[0] <= f1 <= f[-1]:
        raise F1OutOfRange(f"f1={f1:g} Hz outside sweep [{f[0]:g}, {f[-1]:g}] Hz")
    half = 0.5 * np.interp(f1, f, p)
    start = int(np.searchsorted(f, f1, side="right"))
    prev_f, prev_p = f1, 2 * half
    for fi, pi in zip(f[start:], p[start:]):
        if pi <= half:
            if pi == prev_p:
                return float(fi), True
            return float(prev_f + (half - prev_p) * (fi - prev_f) / (pi - prev_p)), True
        prev_f, prev_p = fi, pi
    return float(f[-1]), False


def format_lock_shift_table(curve: LockShiftCurve, header=()) -> str:
    out = io.StringIO()
    out.write(f"# schema={SCHEMA_VERSION}\n")
    for line in header:
        out.write(f"# {line}\n")
    out.write("# " + ",".join(LOCK_COLUMNS) + "\n")
    for f, x, r in zip(curve.f_m, curve.dxi, curve.dxi_over_linewidth):
        out.write(f"{float(f)!r},{float(x)!r},{float(r)!r}\n")
    return out.getvalue()


def parse_lock_shift_table(text: str, linewidth: float) -> LockShiftCurve:
    f, x = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = line.split(",")
        if len(cells) != len(LOCK_COLUMNS):
            raise ValueError(f"line {lineno}: expected {len(LOCK_COLUMNS)} columns")
        f.append(float(cells[0]))
        x.append(float(cells[1]))
    n = len(f)
    return LockShiftCurve(np.array(f), np.array(x), linewidth, [[] for _ in range(n)], [])
