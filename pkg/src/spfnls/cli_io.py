"""Run configuration, self-verifying output files and the command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 blow-up.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import os
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import BlowupError, ConfigError, SpfnlsError
from .model import ModelParams, make_params, solitary_wave
from .noise import IncrementSource, NoiseModel, make_noise, path_stream
from .spectral_core import Grid, lp_norms

log = logging.getLogger("spfnls")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3

# section -> key -> (type, default, help). An empty default means "derived".
SCHEMA = {
    "model": {
        "nu": (float, 4.0, "detuning"),
        "eps": (float, 0.1, "strength of damping and forcing"),
        "gamma": (float, 8.0, "damping rate"),
        "mu": (float, 8.16, "parametric forcing (mu > gamma)"),
        "kappa": (float, 4.0, "Kerr coefficient"),
    },
    "grid": {
        "n_points": (int, 1024, "grid size, power of two"),
        "domain_length": (float, 80.0, "periodic box length"),
    },
    "noise": {
        "kernel": (str, "gaussian", "gaussian | box | file"),
        "length_scale": (float, 0.25, "kernel length (gaussian) or width (box)"),
        "kernel_path": (str, "", "CSV kernel for kind=file"),
        "normalize_beta": (bool, False, "rescale the kernel to beta = 1"),
        "amplitude": (float, 1.0, "multiplies the kernel"),
        "sigma": (float, 0.0, "noise strength"),
    },
    "stepper": {
        "dt": (float, 1e-3, "time step"),
        "scheme": (str, "yoshida_exact_noise", "strang_exact_noise | yoshida_exact_noise | euler_maruyama"),
        "t_end": (float, 10.0, "final time"),
        "record_stride": (int, 100, "steps between records"),
    },
    "initial": {
        "shift": (float, 0.0, "u0 = u*(x + shift) + perturbation"),
        "perturbation": (float, 0.0, "amplitude of a Gaussian bump added to u0"),
        "n_paths": (int, 1, "paths for simulate"),
        "keep_states": (bool, True, "store full states in the trajectory file"),
    },
    "expand": {
        "sigma": (float, 0.05, "noise strength for the coupled expansion run"),
        "t_end": (float, 1.0, "final time"),
        "n_paths": (int, 20, "paths"),
        "record_stride": (int, 50, "steps between records"),
        "ito": (bool, False, "Ito-mean second-order field"),
    },
    "experiment": {
        "study": (str, "diffusion", "diffusion | order | fluctuation | escape"),
        "n_paths": (int, None, "paths per sweep point"),
        "sigma_sweep": (tuple, None, "comma-separated sigmas"),
        "eps_sweep": (tuple, None, "comma-separated escape thresholds"),
        "n_windows": (int, None, "escape reset windows"),
        "window": (float, None, "escape window length (default log(6M)/a)"),
        "t_end": (float, None, "study horizon"),
        "record_dt": (float, None, "recording interval"),
        "dt": (float, None, "time step"),
        "scheme": (str, None, "integrator"),
        "amplitude": (float, None, "kernel amplitude"),
        "n_points": (int, None, "Monte Carlo grid size"),
        "domain_length": (float, None, "Monte Carlo box length"),
        "chunk_size": (int, None, "paths per task"),
    },
    "run": {
        "base_seed": (int, 20240611, "root seed of all path streams"),
        "output_dir": (str, "spfnls-out", "output directory"),
        "cache_dir": (str, "", "linearization cache (default <output_dir>/cache)"),
    },
}


def _parse(typ, raw: str, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


@dataclass
class RunConfig:
    values: dict            # section -> key -> value (None = derived)

    # --- construction ----------------------------------------------------------
    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str, overrides=()) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        cfg = cls.defaults()
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown section [{sec}]")
            for key, raw in cp.items(sec):
                cfg.set(sec, key, raw)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            lhs, raw = item.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
            cfg.set(sec, key, raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | None, overrides=()) -> "RunConfig":
        text = ""
        if path:
            try:
                with open(path) as fh:
                    text = fh.read()
            except OSError as e:
                raise ConfigError(f"cannot read config: {e}") from None
        return cls.from_text(text, overrides)

    def set(self, sec, key, raw):
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        if key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {key!r} in [{sec}]")
        typ, default = SCHEMA[sec][key][:2]
        if raw.strip() == "" and default is None:
            self.values[sec][key] = None
        elif typ is str:
            self.values[sec][key] = raw.strip() or default
        else:
            self.values[sec][key] = _parse(typ, raw, f"[{sec}] {key}")

    # --- resolved objects ----------------------------------------------------------
    def __getitem__(self, sec):
        return self.values[sec]

    def params(self) -> ModelParams:
        m = self["model"]
        return make_params(m["nu"], m["eps"], m["gamma"], m["mu"], m["kappa"])

    def grid(self) -> Grid:
        g = self["grid"]
        return Grid(g["n_points"], g["domain_length"])

    def noise(self, grid: Grid | None = None, sigma: float | None = None) -> NoiseModel:
        n = self["noise"]
        nm = make_noise(grid or self.grid(), n["kernel"], n["length_scale"],
                        n["sigma"] if sigma is None else sigma, n["normalize_beta"],
                        n["kernel_path"] or None, self["run"]["base_seed"])
        return nm.scaled(n["amplitude"]) if n["amplitude"] != 1.0 else nm

    def stepper(self):
        from .dynamics import StepperConfig
        s = self["stepper"]
        return StepperConfig(dt=s["dt"], scheme=s["scheme"], t_end=s["t_end"], record_stride=s["record_stride"])

    def ensemble(self):
        from .experiments import default_spec
        e, n = self["experiment"], self["noise"]
        return default_spec(
            e["study"], n_paths=e["n_paths"], sigma_sweep=e["sigma_sweep"], eps_sweep=e["eps_sweep"],
            n_windows=e["n_windows"], window=e["window"], t_end=e["t_end"], record_dt=e["record_dt"],
            dt=e["dt"], scheme=e["scheme"], beta_scale=e["amplitude"], n_points=e["n_points"],
            domain_length=e["domain_length"], chunk_size=e["chunk_size"], params=self.params(),
            base_seed=self["run"]["base_seed"], kernel=n["kernel"], length_scale=n["length_scale"],
            normalize_beta=n["normalize_beta"], kernel_path=n["kernel_path"] or None,
            cache_dir=self.cache_dir())

    def output_dir(self) -> str:
        return self["run"]["output_dir"]

    def cache_dir(self) -> str:
        return self["run"]["cache_dir"] or os.path.join(self.output_dir(), "cache")

    def validate(self):
        """Build every derived object once so that bad input fails before any compute."""
        from .dynamics import SCHEMES
        try:
            self.params()
            grid = self.grid()
            self.noise(grid)
            self.stepper()
            if self["stepper"]["scheme"] not in SCHEMES:
                raise ConfigError(f"unknown scheme {self['stepper']['scheme']!r}")
            ex = self["expand"]
            if ex["n_paths"] < 1 or ex["t_end"] <= 0 or ex["record_stride"] < 1:
                raise ConfigError("[expand] needs n_paths >= 1, t_end > 0, record_stride >= 1")
            if self["initial"]["n_paths"] < 1:
                raise ConfigError("[initial] n_paths must be >= 1")
            spec = self.ensemble()
            spec.grid
            spec.stride()
            if spec.scheme not in SCHEMES:
                raise ConfigError(f"unknown scheme {spec.scheme!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{type(e).__name__}: {e}") from None

    # --- serialization -------------------------------------------------------------
    def as_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in keys.items()}
                for s, keys in self.values.items()}

    def to_ini(self, with_help=False) -> str:
        out = []
        for sec, keys in SCHEMA.items():
            out.append(f"[{sec}]")
            for k, spec in keys.items():
                if with_help:
                    out.append(f"# {spec[2]}")
                out.append(f"{k} = {_fmt(self.values[sec][k])}".rstrip())
            out.append("")
        return "\n".join(out)


# --- self-verifying files -------------------------------------------------------------

HASH_PREFIX = "# sha256: "
TRAJ_MAGIC = b"SPFNLSTJ"
PNG_SIG = b"\x89PNG\r\n\x1a\n"
PNG_HASH_KEY = b"spfnls-sha256"


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.ndarray, tuple)):
        return list(o)
    if isinstance(o, ModelParams):
        return o.as_dict()
    raise TypeError(type(o).__name__)


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_text(path: str, body: str, config: dict):
    """Text file with a config header and a trailing hash of all preceding bytes."""
    head = f"# spfnls {__version__}\n# config: {_json(config)}\n"
    data = (head + body).encode()
    data += (HASH_PREFIX + hashlib.sha256(data).hexdigest() + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def write_csv(path: str, header, rows, config: dict, footer: dict | None = None):
    lines = [",".join(header)]
    for r in np.atleast_2d(np.asarray(rows, float)) if len(rows) else []:
        lines.append(",".join(_num(v) for v in r))
    for k, v in (footer or {}).items():
        lines.append(f"# {k} = {_num(v)}")
    return write_text(path, "\n".join(lines) + "\n", config)


def write_summary(path: str, summary: dict, config: dict):
    body = "".join(f"{k} = {_num(v) if not isinstance(v, (list, dict)) else _json(v)}\n"
                   for k, v in summary.items())
    return write_text(path, body, config)


def read_table(path: str):
    """(header, array, footer dict) from a CSV written by write_csv."""
    header, rows, footer = None, [], {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                if " = " in line:
                    k, v = line[2:].split(" = ", 1)
                    footer[k] = float(v)
                continue
            if header is None:
                header = line.split(",")
            else:
                rows.append([float(v) for v in line.split(",")])
    return header, np.array(rows), footer


def read_summary(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or " = " not in line:
                continue
            k, v = line.rstrip("\n").split(" = ", 1)
            out[k] = v
    return out


def read_config_header(path: str) -> dict:
    """Embedded config of any spfnls output file."""
    if path.endswith(".bin"):
        with open(path, "rb") as fh:
            fh.seek(len(TRAJ_MAGIC) + 4)
            n = struct.unpack("<I", fh.read(4))[0]
            return json.loads(fh.read(n))["config"]
    if path.endswith(".png"):
        for typ, data in _png_chunks(open(path, "rb").read()):
            if typ == b"tEXt" and data.startswith(b"spfnls-config\0"):
                return json.loads(data.split(b"\0", 1)[1])
        raise ValueError("no embedded config")
    with open(path) as fh:
        for line in fh:
            if line.startswith("# config: "):
                return json.loads(line[len("# config: "):])
    raise ValueError("no embedded config")


# trajectory binary layout (little endian):
#   magic "SPFNLSTJ" | u32 version | u32 header_len | header JSON (utf-8)
#   f64[n_t] times | f64[n_t, P] l2, h1, h2, linf_l2, l6_l6 | f64[P] blowup_time
#   if header.has_states: f64[n_t, P, N, 2] interleaved (re, im)
#   32-byte sha256 of everything before it
def write_trajectory(path: str, traj, config: dict):
    n_t, P = traj.l2.shape
    header = {"version": 1, "n_times": n_t, "n_paths": P, "n_points": traj.grid.n_points,
              "domain_length": traj.grid.domain_length, "has_states": traj.states is not None,
              "provenance": traj.provenance, "config": config}
    hb = _json(header).encode()
    buf = io.BytesIO()
    buf.write(TRAJ_MAGIC + struct.pack("<II", 1, len(hb)) + hb)
    for arr in (traj.times, traj.l2, traj.h1, traj.h2, traj.linf_l2, traj.l6_l6, traj.blowup_time):
        buf.write(np.ascontiguousarray(arr, "<f8").tobytes())
    if traj.states is not None:
        buf.write(np.ascontiguousarray(traj.states.astype("<c16")).view("<f8").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data + hashlib.sha256(data).digest())
    return path


def read_trajectory(path: str):
    from .dynamics import Trajectory
    data = open(path, "rb").read()
    if data[:8] != TRAJ_MAGIC:
        raise ValueError("not a trajectory file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("trajectory hash mismatch")
    _, n = struct.unpack_from("<II", body, 8)
    header = json.loads(body[16:16 + n])
    off = 16 + n
    n_t, P, N = header["n_times"], header["n_paths"], header["n_points"]

    def take(count, shape):
        nonlocal off
        a = np.frombuffer(body, "<f8", count, off).reshape(shape)
        off += 8 * count
        return a.copy()

    times = take(n_t, (n_t,))
    l2, h1, h2, linf, l6 = (take(n_t * P, (n_t, P)) for _ in range(5))
    blow = take(P, (P,))
    states = None
    if header["has_states"]:
        states = take(n_t * P * N * 2, (n_t, P, N, 2))
        states = states[..., 0] + 1j * states[..., 1]
    grid = Grid(N, header["domain_length"])
    return Trajectory(times, grid, states, l2, h1, h2, linf, l6, blow, header["provenance"]), header


def _png_chunks(data: bytes):
    if data[:8] != PNG_SIG:
        raise ValueError("not a PNG file")
    pos, out = 8, []
    while pos < len(data):
        n, typ = struct.unpack_from(">I4s", data, pos)
        out.append((typ, data[pos + 8:pos + 8 + n]))
        pos += 12 + n
    return out


def _png_pack(chunks) -> bytes:
    import zlib
    out = [PNG_SIG]
    for typ, d in chunks:
        out.append(struct.pack(">I", len(d)) + typ + d + struct.pack(">I", zlib.crc32(typ + d)))
    return b"".join(out)


def seal_png(png: bytes, config: dict) -> bytes:
    """Insert config and content-hash tEXt chunks before IEND."""
    chunks = [c for c in _png_chunks(png) if c[0] != b"IEND"]
    chunks.append((b"tEXt", b"spfnls-config\0" + _json(config).encode()))
    digest = hashlib.sha256(_png_pack(chunks + [(b"IEND", b"")])).hexdigest().encode()
    chunks.append((b"tEXt", PNG_HASH_KEY + b"\0" + digest))
    return _png_pack(chunks + [(b"IEND", b"")])


def verify_file(path: str) -> tuple[bool, str]:
    try:
        data = open(path, "rb").read()
    except OSError as e:
        return False, str(e)
    if data.startswith(TRAJ_MAGIC):
        ok = hashlib.sha256(data[:-32]).digest() == data[-32:]
        return ok, "trajectory"
    if data.startswith(PNG_SIG):
        chunks = _png_chunks(data)
        tags = [d.split(b"\0", 1)[1] for t, d in chunks if t == b"tEXt" and d.startswith(PNG_HASH_KEY + b"\0")]
        if not tags:
            return False, "png without hash"
        rest = [c for c in chunks if not (c[0] == b"tEXt" and c[1].startswith(PNG_HASH_KEY + b"\0"))]
        return hashlib.sha256(_png_pack(rest)).hexdigest().encode() == tags[0], "figure"
    text = data.decode(errors="replace")
    i = text.rfind(HASH_PREFIX)
    if i < 0 or not text.endswith("\n"):
        return False, "no hash trailer"
    want = text[i + len(HASH_PREFIX):].strip()
    return hashlib.sha256(data[:len(text[:i].encode())]).hexdigest() == want, "text"


# --- commands ------------------------------------------------------------------------

def _outdir(cfg: RunConfig, sub: str) -> str:
    d = os.path.join(cfg.output_dir(), sub)
    os.makedirs(d, exist_ok=True)
    return d


def initial_field(cfg: RunConfig, grid: Grid, params: ModelParams) -> np.ndarray:
    ini = cfg["initial"]
    u0 = solitary_wave(params, grid, ini["shift"]).u_star.values
    if ini["perturbation"]:
        u0 = u0 + ini["perturbation"] * np.exp(-grid.x ** 2)
    return u0


def cmd_simulate(cfg: RunConfig) -> int:
    from .dynamics import simulate_batch
    from .plotting import plot_trajectory
    params, grid = cfg.params(), cfg.grid()
    nm = cfg.noise(grid)
    sc = cfg.stepper()
    P = cfg["initial"]["n_paths"]
    u0 = np.tile(initial_field(cfg, grid, params), (P, 1))
    src = IncrementSource(nm, [path_stream(cfg["run"]["base_seed"], 0, i) for i in range(P)], sc.dt)
    t0 = time.perf_counter()
    traj = simulate_batch(u0, grid, params, nm, sc, src, keep_states=cfg["initial"]["keep_states"])
    log.info("simulate: %.2f s", time.perf_counter() - t0)
    conf = cfg.as_dict()
    out = _outdir(cfg, "simulate")
    write_trajectory(os.path.join(out, "trajectory.bin"), traj, conf)
    us = solitary_wave(params, grid, cfg["initial"]["shift"]).u_star.values
    rate = -params.eps * (params.gamma - params.mu)
    bound = np.exp(rate * traj.times)[:, None] * traj.l2[0][None, :] * (1 + 1e-6)
    held = bool(np.all(traj.l2 <= bound))
    cols = [traj.times, traj.l2.mean(1), traj.l2.max(1), traj.h1.mean(1), traj.h2.mean(1),
            bound[:, 0]]
    header = ["t", "l2_mean", "l2_max", "h1_mean", "h2_mean", "apriori_bound"]
    dist = None
    if traj.states is not None:
        dist = lp_norms(traj.states - us, grid.dx, 2)
        cols.append(dist.max(1))
        header.append("dist_to_wave_max")
    write_csv(os.path.join(out, "summary.csv"), header, np.column_stack(cols), conf)
    blown = np.isfinite(traj.blowup_time)
    summary = {"n_paths": P, "sigma": nm.sigma, "beta": nm.beta, "apriori_bound_held": held,
               "blowups": int(blown.sum()), "noise_crc": traj.provenance["noise_crc"]}
    stationary = nm.sigma == 0 and not cfg["initial"]["perturbation"]
    if dist is not None:
        summary["sup_dist_to_wave"] = float(dist.max())
    write_summary(os.path.join(out, "summary.txt"), summary, conf)
    plot_trajectory(os.path.join(out, "norms.png"), traj, conf)
    if blown.any():
        print(f"blow-up in {int(blown.sum())} of {P} paths (first at t={np.nanmin(traj.blowup_time):.6g})")
        return EXIT_BLOWUP
    verdict = "a priori bound held" if held else "a priori bound VIOLATED"
    if stationary and dist is not None:
        sd = float(dist.max())
        verdict = (f"stationary within 1e-6 (sup dist {sd:.3g}); " if sd < 1e-6
                   else f"drifted from the wave (sup dist {sd:.3g}); ") + verdict
    print(verdict)
    return EXIT_OK if held else EXIT_RUNTIME


def cmd_spectrum(cfg: RunConfig) -> int:
    from .linearization import cached_linearization
    from .plotting import plot_spectrum
    params, grid = cfg.params(), cfg.grid()
    wave = solitary_wave(params, grid, cfg["initial"]["shift"])
    t0 = time.perf_counter()
    pack = cached_linearization(wave, cfg.cache_dir(), fit=True)
    log.info("spectrum: pack ready in %.2f s", time.perf_counter() - t0)
    conf = cfg.as_dict()
    out = _outdir(cfg, "spectrum")
    lam = pack.spectrum
    order = np.lexsort((lam.imag, -lam.real))
    zero = np.zeros(lam.size, bool)
    zero[pack.zero_index] = True
    write_csv(os.path.join(out, "spectrum.csv"), ["re", "im", "is_zero_mode"],
              np.column_stack([lam.real[order], lam.imag[order], zero[order]]), conf)
    fit = pack.decay_fit
    n_small = int(np.sum(np.abs(lam) <= 1e-8 * pack.matrix_norm))
    summary = {"gap_b": pack.gap_b, "decay_M": fit.M, "decay_a": fit.a, "reset_window": pack.reset_window,
               "zero_eigenvalue_abs": abs(pack.zero_eigenvalue), "n_near_zero": n_small,
               "zero_mode_cosine": getattr(pack, "zero_mode_cosine", float("nan")),
               "operator_norm": pack.matrix_norm}
    write_summary(os.path.join(out, "summary.txt"), summary, conf)
    write_csv(os.path.join(out, "decay_fit.csv"), ["t", "norm_times_exp_at"],
              np.column_stack([fit.t, fit.norms]), conf, {"M": fit.M, "a": fit.a})
    plot_spectrum(os.path.join(out, "spectrum.png"), pack, conf)
    print(f"gap b = {pack.gap_b:.6g}; M = {fit.M:.6g}, a = {fit.a:.6g}; "
          f"{n_small} eigenvalue(s) with |lambda| <= 1e-8 ||L||")
    return EXIT_OK


def cmd_expand(cfg: RunConfig) -> int:
    from .expansion import run_coupled
    from .linearization import cached_linearization
    from .plotting import plot_expansion
    params, grid = cfg.params(), cfg.grid()
    ex, st = cfg["expand"], cfg["stepper"]
    wave = solitary_wave(params, grid)
    pack = cached_linearization(wave, cfg.cache_dir(), fit=False)
    nm = cfg.noise(grid)
    streams = [path_stream(cfg["run"]["base_seed"], 0, i) for i in range(ex["n_paths"])]
    diag = run_coupled(pack, nm, ex["sigma"], ex["t_end"], st["dt"], streams, ex["record_stride"],
                       st["scheme"], ito=ex["ito"])
    conf = cfg.as_dict()
    out = _outdir(cfg, "expand")
    names = ("a1", "a2", "w1", "w2", "v1", "v2", "z", "zp", "taylor")
    cols = [diag.times] + [np.median(np.abs(getattr(diag, k)), axis=1) for k in names]
    write_csv(os.path.join(out, "diagnostics.csv"), ["t"] + [f"median_abs_{k}" for k in names],
              np.column_stack(cols), conf)
    summary = {"sigma": ex["sigma"], "n_paths": ex["n_paths"], "noise_crc": diag.crc,
               "recon_v1": diag.recon[0], "recon_v2": diag.recon[1], "recon_projection": diag.recon[2],
               "median_sup_z": float(np.median(diag.sup("z"))),
               "median_sup_zprime": float(np.median(diag.sup("zp")))}
    write_summary(os.path.join(out, "summary.txt"), summary, conf)
    plot_expansion(os.path.join(out, "expansion.png"), diag, conf)
    ok = max(diag.recon) < 1e-8
    print(f"median sup|z'| = {summary['median_sup_zprime']:.3g}, median sup|z| = {summary['median_sup_z']:.3g}; "
          f"reconstruction {'ok' if ok else 'FAILED'} ({max(diag.recon):.2g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def write_gnuplot_stub(path: str, data: str, header, loglog: bool, config: dict):
    """Minimal gnuplot script plotting every column of `data` against the first."""
    body = ('set datafile separator ","\n'
            "set key autotitle columnhead\n"
            + ("set logscale xy\n" if loglog else "")
            + f"set xlabel '{header[0]}'\n"
            + f"plot for [j=2:{len(header)}] '{data}' using 1:j with linespoints\n")
    return write_text(path, body, config)


def write_report(report, outdir: str, config: dict):
    """Summary text, one CSV and gnuplot stub per table, and one figure per study."""
    from .plotting import plot_report
    os.makedirs(outdir, exist_ok=True)
    summary = dict(report.summary)
    summary.update({f"check:{k}": bool(v) for k, v in report.checks.items()})
    conf = {"run": config, "spec": report.spec}
    paths = [write_summary(os.path.join(outdir, f"{report.name}_summary.txt"), summary, conf)]
    for name, (header, rows) in report.tables.items():
        fname = name.replace("[", "_").replace("]", "").replace("/", "_half")
        footer = None
        if report.name == "order":
            lvl = name[name.index("[") + 1:-1]
            footer = {"slope_z": report.summary[f"{lvl}:slope_z"],
                      "slope_zprime": report.summary[f"{lvl}:slope_zprime"]}
        paths.append(write_csv(os.path.join(outdir, f"{fname}.csv"), header, rows, conf, footer))
        paths.append(write_gnuplot_stub(os.path.join(outdir, f"{fname}.gp"), f"{fname}.csv", header,
                                        loglog=report.name in ("order", "fluctuation"), config=conf))
    paths += plot_report(outdir, report, conf)
    return paths


def cmd_experiment(cfg: RunConfig) -> int:
    from .experiments import build_pack, run_study, worker_count
    spec = cfg.ensemble()
    study = cfg["experiment"]["study"]
    t0 = time.perf_counter()
    pack = build_pack(spec, fit=study in ("fluctuation", "escape"))
    report = run_study(study, spec, pack)
    log.info("experiment %s: %.1f s with %d worker(s)", study, time.perf_counter() - t0, worker_count(spec))
    write_report(report, _outdir(cfg, study), cfg.as_dict())
    for k, v in report.checks.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    return EXIT_OK


def cmd_verify(paths) -> int:
    files = []
    for p in paths:
        if os.path.isdir(p):
            for root, _, names in os.walk(p):
                if os.path.basename(root) == "cache":
                    continue
                files += [os.path.join(root, n) for n in sorted(names)]
        else:
            files.append(p)
    bad = 0
    for f in sorted(files):
        ok, kind = verify_file(f)
        bad += not ok
        print(f"{'OK ' if ok else 'BAD'} {kind:10s} {f}")
    return EXIT_OK if bad == 0 and files else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spfnls", description="Stochastic parametrically forced NLS toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (("simulate", "run trajectories"), ("spectrum", "linearized spectrum and decay fit"),
                      ("expand", "coupled second-order expansion run"), ("experiment", "Monte Carlo study")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("-c", "--config", help="INI file")
        p.add_argument("-s", "--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("-o", "--output-dir")
    p = sub.add_parser("verify", help="re-check embedded hashes")
    p.add_argument("paths", nargs="+")
    p = sub.add_parser("defaults", help="print the default config")
    p.add_argument("--help-keys", action="store_true", help="annotate keys")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "defaults":
        sys.stdout.write(RunConfig.defaults().to_ini(with_help=args.help_keys))
        return EXIT_OK
    if args.command == "verify":
        return cmd_verify(args.paths)
    try:
        overrides = list(args.set) + ([f"run.output_dir={args.output_dir}"] if args.output_dir else [])
        cfg = RunConfig.load(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    cmd = {"simulate": cmd_simulate, "spectrum": cmd_spectrum, "expand": cmd_expand,
           "experiment": cmd_experiment}[args.command]
    try:
        return cmd(cfg)
    except BlowupError as e:
        print(f"blow-up: {e}", file=sys.stderr)
        return EXIT_BLOWUP
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpfnlsError, RuntimeError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
