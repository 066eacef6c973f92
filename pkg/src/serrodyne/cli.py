"""Command-line front end.

Every option can also be given in an INI file (``--config``) under a
section named after the command; keys match the long option names with
dashes or underscores. Command-line flags take precedence.

Exit status: 0 success, 2 configuration/validation error, 3 computation
error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import pdh, rf_chain, spectral, waveform

log = logging.getLogger("serrodyne")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPUTE = 3

DEFAULT_FS = 9.85e9
DEFAULT_CAVITY = "d=0.1,r1=0.5,r2=inf,linewidth=200e3"
DEFAULT_CONTRASTS = ("1=30", "2=15")


class ConfigError(Exception):
    """Bad or missing configuration; the message names the offending field."""


# --- option parsing helpers ----------------------------------------------------


def _float(name, value):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: not a number: {value!r}") from None
    if math.isnan(x):
        raise ConfigError(f"{name}: not a number: {value!r}")
    return x


def _positive(name, value):
    x = _float(name, value)
    if not x > 0 or math.isinf(x):
        raise ConfigError(f"{name}: must be a positive finite number, got {value!r}")
    return x


def _int(name, value, minimum=1):
    try:
        x = int(str(value))
    except ValueError:
        raise ConfigError(f"{name}: not an integer: {value!r}") from None
    if x < minimum:
        raise ConfigError(f"{name}: must be >= {minimum}, got {x}")
    return x


def parse_tf(value: str) -> rf_chain.TransferFunction:
    """``flat`` | ``bandpass:<f_lo>:<f_hi>`` | path to a CSV table."""
    if value == "flat":
        return rf_chain.flat()
    if value.startswith("bandpass:"):
        parts = value.split(":")
        if len(parts) != 3:
            raise ConfigError(f"tf: expected bandpass:<f_lo>:<f_hi>, got {value!r}")
        lo, hi = _positive("tf f_lo", parts[1]), _positive("tf f_hi", parts[2])
        try:
            return rf_chain.synth_bandpass(lo, hi)
        except ValueError as exc:
            raise ConfigError(f"tf: {exc}") from None
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"tf: transfer-function file not found: {path}")
    try:
        with path.open() as fh:
            return rf_chain.load_table(fh, name=path.name)
    except ValueError as exc:
        raise ConfigError(f"tf: {path}: {exc}") from None


def parse_cavity(value: str, contrasts) -> pdh.CavityModel:
    fields = {}
    for item in value.split(","):
        key, sep, val = item.partition("=")
        key = key.strip().lower()
        if not sep or key not in ("d", "r1", "r2", "linewidth"):
            raise ConfigError(f"cavity: bad item {item!r} (want d=,r1=,r2=,linewidth=)")
        fields[key] = math.inf if val.strip().lower() in ("inf", "infinity") else _float(f"cavity {key}", val)
    if "d" not in fields:
        raise ConfigError("cavity: length d is required")
    cmap = {}
    for item in contrasts:
        key, sep, val = str(item).partition("=")
        if not sep:
            raise ConfigError(f"contrast: expected k=<value>, got {item!r}")
        cmap[_int("contrast k", key.strip())] = _float(f"contrast C_{key.strip()}", val)
    try:
        return pdh.CavityModel(
            d=fields["d"],
            r1=fields.get("r1", math.inf),
            r2=fields.get("r2", math.inf),
            linewidth=fields.get("linewidth", 200e3),
            contrasts=cmap,
        )
    except pdh.UnstableCavity as exc:
        raise ConfigError(f"cavity: unstable geometry: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"cavity: {exc}") from None


def parse_laser(value: str) -> pdh.LaserSpectrumModel:
    if value == "serrodyne":
        return pdh.serrodyne_measured()
    if value == "target":
        return pdh.target_only()
    if value.startswith("dsb:"):
        return pdh.dsb_spectrum(_positive("laser dsb depth", value[4:]))
    raise ConfigError(f"laser: expected serrodyne|target|dsb:<beta>, got {value!r}")


def frequency_list(opts) -> list[float]:
    if opts.get("fm"):
        return [_positive("fm", v) for v in str(opts["fm"]).replace(",", " ").split()]
    start, stop, step = (opts.get(k) for k in ("fm_start", "fm_stop", "fm_step"))
    if start is None or stop is None or step is None:
        raise ConfigError("fm: give --fm or all of --fm-start/--fm-stop/--fm-step")
    start = _positive("fm_start", start)
    stop = _positive("fm_stop", stop)
    step = _positive("fm_step", step)
    if stop < start:
        raise ConfigError(f"fm_stop ({stop:g}) is below fm_start ({start:g})")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return list(start + step * np.arange(count))


# --- config merging ------------------------------------------------------------


LIST_KEYS = {"contrast", "n_index"}


def load_config(path, section: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {p}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"config: {p}: {exc}") from None
    out = {}
    if cp.has_section(section):
        for key, val in cp.items(section):
            key = key.replace("-", "_")
            if key in LIST_KEYS:
                val = [v for v in val.replace(",", " ").split() if v]
            out[key] = val
    return out


def merged(args: argparse.Namespace, section: str) -> dict:
    opts = load_config(args.config, section)
    for key, val in vars(args).items():
        if key in ("config", "command", "func") or val is None:
            continue
        if isinstance(val, list) and not val:
            continue
        opts[key] = val
    return opts


# --- commands ------------------------------------------------------------------


def _write(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _metrics_lines(m: spectral.ShiftMetrics, prefix=""):
    return [
        f"{prefix}target_hz={float(m.target_hz)!r}",
        f"{prefix}conversion_loss_db={float(m.conversion_loss_db)!r}",
        f"{prefix}suppression_db={float(m.suppression_db)!r}",
        f"{prefix}spur_offset_hz={float(m.spur_offset_hz)!r}",
    ]


def _model_options(opts):
    fs = _positive("fs", opts.get("fs", DEFAULT_FS))
    n = _int("n_index", opts.get("n_index", [1])[0] if isinstance(opts.get("n_index"), list) else opts.get("n_index", 1))
    periods = _int("periods", opts.get("periods", spectral.DEFAULT_PERIODS))
    oversample = _int("oversample", opts.get("oversample", spectral.DEFAULT_OVERSAMPLE), minimum=2)
    interp = opts.get("interp", "linear")
    if interp not in ("linear", "zoh"):
        raise ConfigError(f"interp: expected linear|zoh, got {interp!r}")
    tf = parse_tf(str(opts.get("tf", "flat")))
    return fs, n, periods, oversample, interp, tf


def cmd_simulate(args) -> int:
    opts = merged(args, "simulate")
    fs, n, periods, oversample, interp, tf = _model_options(opts)
    if opts.get("fm") is None:
        raise ConfigError("fm: required")
    fm = _positive("fm", opts["fm"])
    if fm >= fs / 2:
        raise ConfigError(f"fm: {fm:g} Hz must be below fs/2 = {fs / 2:g} Hz")
    f_snap, n_periods = spectral.snap_frequency(fm, fs, periods)
    spec = waveform.SawtoothSpec(f_snap, n)
    phi = spectral.drive_phase(spec, tf, fs, n_periods, oversample, interp)
    a_star, _ = spectral.best_amplitude(phi, n * n_periods, *spectral.amplitude_bracket(spec, tf))
    s = spectral.modulate(phi, a_star)
    m = spectral.metrics(s, spec.target_hz)
    lines = [
        f"# schema={spectral.SCHEMA_VERSION}",
        f"fs_hz={fs!r}",
        f"fm_requested_hz={fm!r}",
        f"fm_hz={f_snap!r}",
        f"N={n}",
        f"periods={n_periods}",
        f"tf={tf.name or tf.source}",
        f"a_star={float(a_star)!r}",
        *_metrics_lines(m),
    ]
    _write("\n".join(lines) + "\n", opts.get("out"))
    if opts.get("spectrum_out"):
        keep = s.power > 1e-15
        body = "".join(f"{float(f)!r},{float(p)!r}\n" for f, p in zip(s.f_bin[keep], s.power[keep]))
        Path(opts["spectrum_out"]).write_text(
            f"# schema={spectral.SCHEMA_VERSION}\n# offset_hz,power\n" + body
        )
    return EXIT_OK


def band_footer(rows) -> list[str]:
    lines = []
    for label, kw in (
        ("loss<1dB", {"loss_below": 1.0}),
        ("loss<2dB", {"loss_below": 2.0}),
        ("suppression>10dB", {"suppression_above": 10.0}),
        ("suppression>15dB", {"suppression_above": 15.0}),
    ):
        bands = spectral.extract_bands(rows, **kw)
        text = " ".join(f"{a!r}:{b!r}" for a, b in bands) or "none"
        lines.append(f"band {label} {text}")
    return lines


def cmd_sweep(args) -> int:
    opts = merged(args, "sweep")
    fs, _, periods, oversample, interp, tf = _model_options(opts)
    raw_n = opts.get("n_index", [1])
    n_list = [_int("n_index", v) for v in (raw_n if isinstance(raw_n, list) else [raw_n])]
    freqs = frequency_list(opts)
    if not freqs:
        raise ConfigError("fm: empty frequency list")
    for f in freqs:
        if f >= fs / 2:
            raise ConfigError(f"fm: {f:g} Hz must be below fs/2 = {fs / 2:g} Hz")
    workers = _int("workers", opts.get("workers", 1))
    out = opts.get("out")
    tables = []
    total_ok = 0
    for n in n_list:
        rows = spectral.sweep(
            freqs, n, tf, fs, periods=periods, oversample=oversample, kind=interp, max_workers=workers
        )
        total_ok += sum(r.ok for r in rows)
        footer = [f"fs_hz={fs!r}", f"tf={tf.name or tf.source}", *band_footer(rows)]
        tables.append((n, spectral.format_sweep_table(rows, footer)))
    if total_ok == 0:
        log.error("every sweep row failed")
        return EXIT_COMPUTE
    if out and len(tables) > 1:
        p = Path(out)
        for n, text in tables:
            p.with_name(f"{p.stem}_N{n}{p.suffix}").write_text(text)
    else:
        _write("".join(text for _, text in tables), out)
    return EXIT_OK


def cmd_pdh(args) -> int:
    opts = merged(args, "pdh")
    contrasts = opts.get("contrast") or list(DEFAULT_CONTRASTS)
    cavity = parse_cavity(str(opts.get("cavity", DEFAULT_CAVITY)), contrasts)
    laser = parse_laser(str(opts.get("laser", "serrodyne")))
    cfg = pdh.PdhConfig(
        mod_freq=_positive("pdh_freq", opts.get("pdh_freq", 25e6)),
        depth=_positive("pdh_depth", opts.get("pdh_depth", 1.082)),
        linewidth=cavity.linewidth,
    )
    freqs = frequency_list(
        {"fm_start": 50e6, "fm_stop": 1600e6, "fm_step": cavity.linewidth / 10, **opts}
    )
    curve = pdh.lock_shift_sweep(freqs, cavity, laser, cfg)
    header = [f"cavity {line}" for line in cavity.report().splitlines()]
    header += [
        f"laser={laser.name}",
        f"pdh_freq_hz={cfg.mod_freq!r}",
        f"pdh_depth_rad={cfg.depth!r}",
        f"max_abs_dxi_hz={float(np.nanmax(np.abs(curve.dxi))) if curve.dxi.size else 0.0!r}",
    ]
    for f, msg in curve.errors:
        header.append(f"no_lock f_m_hz={f!r}: {msg}")
    if opts.get("gain_curve"):
        path = Path(opts["gain_curve"])
        if not path.is_file():
            raise ConfigError(f"gain_curve: file not found: {path}")
        rows = spectral.parse_sweep_table(path.read_text())
        f1 = _positive("f1", opts.get("f1", rows[0].f_m if rows else 1.0))
        try:
            f2, reached = pdh.dynamic_range(rows, f1)
        except pdh.F1OutOfRange as exc:
            raise ConfigError(f"f1: {exc}") from None
        header.append(f"dynamic_range f1_hz={float(f1)!r} f2_hz={float(f2)!r} reached={reached}")
    _write(pdh.format_lock_shift_table(curve, header), opts.get("out"))
    return EXIT_OK


def quantization_spur_dbc(phi_q, phi_i, target_hz: float) -> float:
    """Strongest spectral line of the field error exp(i*phi_q) - exp(i*phi_i),
    relative to the ideal target line; the target bin itself is excluded."""
    n = len(phi_i)
    ideal = np.fft.fft(np.exp(1j * phi_i.samples)) / n
    err = np.abs(np.fft.fft(np.exp(1j * phi_q.samples)) / n - ideal) ** 2
    k = int(round(target_hz * n / phi_i.f_s)) % n
    p_target = abs(ideal[k]) ** 2
    err[k] = 0.0
    worst = float(err.max())
    if worst == 0 or p_target == 0:
        return -math.inf
    return 10 * math.log10(worst / p_target)


def cmd_rampgen(args) -> int:
    opts = merged(args, "rampgen")
    fs = _positive("fs", opts.get("fs", DEFAULT_FS))
    if opts.get("fm") is None:
        raise ConfigError("fm: required")
    fm = _positive("fm", opts["fm"])
    amp = _float("amplitude", opts.get("amplitude", 1.0))
    n = _int("n_index", opts["n_index"][0] if isinstance(opts.get("n_index"), list) else opts.get("n_index", 1))
    record = _int("record", opts.get("record", 1 << 16), minimum=2)
    if record & (record - 1):
        raise ConfigError(f"record: must be a power of two, got {record}")
    n_dump = _int("samples", opts.get("samples", 64))
    try:
        inc = waveform.freq_to_inc(fm, fs)
        g = waveform.amplitude_to_gain(amp)
    except waveform.OutOfRange as exc:
        raise ConfigError(f"registers: {exc}") from None
    quantum = waveform.ACC_MOD // record
    inc_coherent = max(quantum, round(inc / quantum) * quantum)
    if inc_coherent >= waveform.ACC_MOD // 2:
        raise ConfigError("fm: too close to fs/2 for the requested record length")
    cfg = waveform.RampGenConfig(inc_coherent, g, f_s=fs)
    if g == 0:
        log.warning("gain register is 0: DAC output is all zeros")

    ramp = waveform.rampgen_emulate(cfg, record)
    ideal_norm = (waveform.accumulator(cfg, record).astype(float) - 2.0**31) * g / 2.0**47
    ideal = waveform.SampledWaveform(fs, ideal_norm, "norm", cfg.f_m)
    tf = parse_tf(str(opts.get("tf", "flat")))
    oversample = _int("oversample", opts.get("oversample", spectral.DEFAULT_OVERSAMPLE), minimum=1)
    kind = opts.get("interp", "linear")

    def drive(w):
        phi = w.scaled(np.pi * n)
        if oversample > 1:
            phi = waveform.interpolate(phi, oversample, kind)
        return rf_chain.apply(tf, phi)

    phi_q, phi_i = drive(ramp), drive(ideal)
    sq, si = spectral.modulate(phi_q), spectral.modulate(phi_i)
    target = n * cfg.f_m
    mq, mi = spectral.metrics(sq, target), spectral.metrics(si, target)
    quant_dbc = quantization_spur_dbc(phi_q, phi_i, target)

    lines = [
        f"# schema={spectral.SCHEMA_VERSION}",
        f"# fs_hz={fs!r}",
        f"# fm_requested_hz={fm!r}",
        f"# inc_requested={inc}",
        f"# inc={cfg.inc}",
        f"# fm_hz={cfg.f_m!r}",
        f"# g={cfg.g}",
        f"# N={n}",
        f"# record={record}",
        *("# quantized_" + s for s in _metrics_lines(mq)),
        *("# ideal_" + s for s in _metrics_lines(mi)),
        f"# quantization_spur_dbc={quant_dbc!r}",
        "# k,code,value",
    ]
    codes = waveform.rampgen_codes(cfg, n_dump)
    lines += [f"{k},{int(c)},{float(c) / 2 ** (cfg.dac_bits - 1)!r}" for k, c in enumerate(codes)]
    _write("\n".join(lines) + "\n", opts.get("out"))
    if opts.get("spectrum_out"):
        keep = (sq.power > 1e-15) | (si.power > 1e-15)
        body = "".join(
            f"{float(f)!r},{float(a)!r},{float(b)!r}\n" for f, a, b in zip(sq.f_bin[keep], sq.power[keep], si.power[keep])
        )
        Path(opts["spectrum_out"]).write_text(
            f"# schema={spectral.SCHEMA_VERSION}\n# offset_hz,power_quantized,power_ideal\n" + body
        )
    return EXIT_OK


# --- argument parser -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serrodyne", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fm=True):
        p.add_argument("--config", help="INI file; section named after the command")
        p.add_argument("--fs", help="DAC sample rate (Hz)")
        p.add_argument("--tf", help="flat | bandpass:<f_lo>:<f_hi> | CSV path")
        p.add_argument("--n-index", action="append", default=[], help="shift index N")
        p.add_argument("--oversample", help="reconstruction grid factor")
        p.add_argument("--interp", choices=("linear", "zoh"))
        p.add_argument("--out", help="output path (default stdout)")
        if fm:
            p.add_argument("--fm", help="ramp frequency (Hz)")

    def fm_range(p):
        p.add_argument("--fm-start")
        p.add_argument("--fm-stop")
        p.add_argument("--fm-step")

    p = sub.add_parser("simulate", help="metrics for one ramp frequency")
    common(p)
    p.add_argument("--periods")
    p.add_argument("--spectrum-out", help="write the optical spectrum here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="optimised performance versus ramp frequency")
    common(p)
    fm_range(p)
    p.add_argument("--periods")
    p.add_argument("--workers")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pdh", help="PDH lock-point shift versus offset frequency")
    p.add_argument("--config")
    p.add_argument("--fm", help="explicit offset frequencies (Hz)")
    fm_range(p)
    p.add_argument("--cavity", help="d=<m>,r1=<m>,r2=<m|inf>,linewidth=<hz>")
    p.add_argument("--contrast", action="append", default=[], help="k=<C_k>, repeatable")
    p.add_argument("--laser", help="serrodyne | target | dsb:<beta>")
    p.add_argument("--pdh-freq", help="PDH modulation frequency (Hz)")
    p.add_argument("--pdh-depth", help="PDH modulation depth (rad)")
    p.add_argument("--gain-curve", help="sweep CSV for the dynamic-range estimate")
    p.add_argument("--f1", help="lower offset frequency for the dynamic range (Hz)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pdh)

    p = sub.add_parser("rampgen", help="bit-accurate ramp generator emulation")
    common(p)
    p.add_argument("--amplitude", help="normalized amplitude in [0, 1]")
    p.add_argument("--record", help="spectrum record length (power of two)")
    p.add_argument("--samples", help="number of samples to dump")
    p.add_argument("--spectrum-out")
    p.set_defaults(func=cmd_rampgen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        force=True,
    )
    del args.verbose
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError) as exc:
        log.error("computation failed: %s", exc)
        return EXIT_COMPUTE
    except BrokenPipeError:
        # downstream reader closed early (e.g. `| head`)
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
