"""Vibration records: synthetic generation, segmentation and CSV persistence."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientData, InvalidConfig, ParseError, SchemaError
from .model import (
    BASE_ACCELERATION,
    QUANTITIES,
    SdofSpec,
    ShearBuildingSpec,
    _propagate,
    discretize,
    simulate,
    state_space,
)

_QUANTITY_TAGS = {"displacement": "disp", "velocity": "vel", "acceleration": "acc"}
_TAG_QUANTITIES = {v: k for k, v in _QUANTITY_TAGS.items()}

# Two-sided PSD per rad/s: white-noise variance 2*pi*S0/dt.
PSD_CONVENTION = "two-sided rad/s: variance = 2*pi*S0/dt"


@dataclass
class TimeHistoryRecord:
    """Sampled inputs ``U`` (N_I x n) and outputs ``Y`` (N_o x n).

    ``sensor_map`` lists the model DOF (0-based) observed by each output row
    and ``quantity`` names which kinematic response they measure.
    """

    dt: float
    inputs: np.ndarray
    outputs: np.ndarray
    sensor_map: tuple = None
    quantity: str = "displacement"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.inputs.shape[1] != self.outputs.shape[1]:
            raise ValueError("input and output channels must share the sample count")
        if self.quantity not in QUANTITIES:
            raise ValueError(f"quantity must be one of {QUANTITIES}")
        if self.sensor_map is None:
            self.sensor_map = tuple(range(self.outputs.shape[0]))
        self.sensor_map = tuple(int(i) for i in self.sensor_map)
        if len(self.sensor_map) != self.outputs.shape[0]:
            raise ValueError("sensor_map needs one entry per output channel")

    @property
    def n(self):
        return self.outputs.shape[1]

    @property
    def n_inputs(self):
        return self.inputs.shape[0]

    @property
    def n_outputs(self):
        return self.outputs.shape[0]

    def slice(self, start, stop):
        return TimeHistoryRecord(
            self.dt,
            self.inputs[:, start:stop].copy(),
            self.outputs[:, start:stop].copy(),
            self.sensor_map,
            self.quantity,
            dict(self.metadata),
        )


@dataclass
class SegmentSet:
    segments: list
    source_id: str = ""
    offsets: tuple = ()

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]


@dataclass
class FrequencyLaw:
    mean: float = 1 / (2 * math.pi)
    std: float = 1 / (200 * math.pi)
    redraw_block: float = 50.0


@dataclass
class GeneratorConfig:
    """Settings of the synthetic SDOF experiment (defaults reproduce it)."""

    spectral_power: float = 0.0013
    dt: float = 0.005
    duration: float = 2000.0
    noise_rms_ratio: float = 0.01
    frequency_law: FrequencyLaw = field(default_factory=FrequencyLaw)
    damping_true: float = 0.05
    seed: int = 0

    def validate(self):
        if not self.spectral_power >= 0:
            raise InvalidConfig("spectral_power must be >= 0")
        if not self.dt > 0:
            raise InvalidConfig("dt must be positive")
        if not self.duration > 0:
            raise InvalidConfig("duration must be positive")
        if not 0 <= self.noise_rms_ratio < 1:
            raise InvalidConfig("noise_rms_ratio must lie in [0, 1)")
        law = self.frequency_law
        if not law.redraw_block > 0:
            raise InvalidConfig("redraw_block must be positive")
        if not law.mean > 0 or law.std < 0:
            raise InvalidConfig("frequency law needs mean > 0 and std >= 0")
        if not 0 < self.damping_true < 1:
            raise InvalidConfig("damping_true must lie in (0, 1)")

    @property
    def n_samples(self):
        return int(round(self.duration / self.dt))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("kind", None)
        law = d.pop("frequency_law", {})
        try:
            return cls(frequency_law=FrequencyLaw(**law), **d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def to_dict(self):
        return {"kind": "sdof", **asdict(self)}


def generate_gwn(spectral_power, dt, n, seed):
    """Zero-mean Gaussian white noise with variance ``2 pi S0 / dt``."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    sigma = math.sqrt(2 * math.pi * spectral_power / dt)
    return sigma * rng.standard_normal(n)


def _add_noise(clean, ratio, rng):
    """Add white noise scaled so each channel's noise/clean RMS equals ratio."""
    noise = rng.standard_normal(clean.shape)
    if ratio == 0:
        return clean.copy(), np.zeros_like(clean)
    rms_clean = np.sqrt(np.mean(clean**2, axis=1, keepdims=True))
    rms_noise = np.sqrt(np.mean(noise**2, axis=1, keepdims=True))
    noise *= ratio * rms_clean / rms_noise
    return clean + noise, noise


def _simulate_blocks(spec_for_block, thetas, u, dt, block_len, quantity, sensors):
    """Simulate block-wise, carrying the state across block boundaries."""
    n = u.shape[1]
    x = None
    rows = []
    for b, theta in enumerate(thetas):
        start, stop = b * block_len, min((b + 1) * block_len, n)
        if start >= n:
            break
        spec = spec_for_block
        ss = state_space(spec, theta)
        Ad, Bd = discretize(ss, dt)
        ub = u[:, start:stop]
        if x is None:
            x = np.zeros(ss.A.shape[0])
        m = stop - start
        # one extra step gives the state that starts the next block
        forcing = (Bd @ ub)[:, None, :]
        X = _propagate(Ad, x[:, None], forcing, m + 1)[:, 0, :]
        x = X[:, -1]
        X = X[:, :m]
        nd = ss.n_dof
        resp = {
            "displacement": X[:nd],
            "velocity": X[nd:],
            "acceleration": ss.acc_state @ X + ss.acc_input @ ub,
        }[quantity]
        rows.append(resp[list(sensors)])
    return np.concatenate(rows, axis=1)


def synthesize_sdof_dataset(config, return_truth=False):
    """Generate the noisy displacement record of the SDOF experiment.

    A new natural frequency is drawn from the frequency law every
    ``redraw_block`` seconds; the oscillator state is continuous across
    blocks. With ``return_truth`` also returns a dict holding the block
    frequencies, the clean response and the injected noise.
    """
    config.validate()
    n = config.n_samples
    if n <= 0:
        raise InvalidConfig("duration shorter than one sample")
    ss_in, ss_f, ss_noise = np.random.SeedSequence(config.seed, spawn_key=(0,)).spawn(3)
    u = generate_gwn(config.spectral_power, config.dt, n, ss_in)[None, :]
    law = config.frequency_law
    block_len = max(1, int(round(law.redraw_block / config.dt)))
    n_blocks = -(-n // block_len)
    freqs = law.mean + law.std * np.random.default_rng(ss_f).standard_normal(n_blocks)
    if np.any(freqs <= 0):
        raise InvalidConfig("frequency law produced a non-positive frequency")
    spec = SdofSpec(law.mean, config.damping_true)
    clean = _simulate_blocks(spec, freqs[:, None], u, config.dt, block_len, "displacement", (0,))
    y, noise = _add_noise(clean, config.noise_rms_ratio, np.random.default_rng(ss_noise))
    record = TimeHistoryRecord(
        config.dt, u, y, (0,), "displacement",
        metadata={"source": f"sdof-generator:seed={config.seed}", "psd_convention": PSD_CONVENTION},
    )
    if not return_truth:
        return record
    truth = {
        "block_frequencies": freqs,
        "block_samples": block_len,
        "noise_std": float(np.std(noise)),
        "clean": clean,
        "noise": noise,
    }
    return record, truth


@dataclass
class ShearTwinConfig:
    """Synthetic shear-building record with per-segment parameter draws.

    ``theta_mean``/``theta_std`` define a Gaussian (diagonal) from which one
    parameter vector is drawn per block of ``block_seconds``.
    """

    theta_mean: list = field(default_factory=lambda: [1.0] * 6)
    theta_std: list = field(default_factory=lambda: [0.02] * 3 + [0.05] * 3)
    spectral_power: float = 0.0013
    dt: float = 0.005
    duration: float = 980.0
    block_seconds: float = 10.0
    noise_rms_ratio: float = 0.01
    observed_dof: int = 2
    quantity: str = "acceleration"
    seed: int = 0

    def validate(self, spec):
        if len(self.theta_mean) != spec.n_theta or len(self.theta_std) != spec.n_theta:
            raise InvalidConfig("theta_mean/theta_std must match the model parameter count")
        if any(s < 0 for s in self.theta_std):
            raise InvalidConfig("theta_std must be non-negative")
        if not (self.dt > 0 and self.duration > 0 and self.block_seconds > 0):
            raise InvalidConfig("dt, duration and block_seconds must be positive")
        if not 0 <= self.noise_rms_ratio < 1:
            raise InvalidConfig("noise_rms_ratio must lie in [0, 1)")
        if not 0 <= self.observed_dof < spec.n_dof:
            raise InvalidConfig("observed_dof out of range")
        if self.quantity not in QUANTITIES:
            raise InvalidConfig(f"quantity must be one of {QUANTITIES}")

    @property
    def n_samples(self):
        return int(round(self.duration / self.dt))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("kind", None)
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def to_dict(self):
        return {"kind": "shear-twin", **asdict(self)}


def synthesize_shear_dataset(spec, config, return_truth=False):
    """Generate a base-excited shear-building record (one sensor)."""
    if not isinstance(spec, ShearBuildingSpec) or spec.excitation != BASE_ACCELERATION:
        raise InvalidConfig("shear twin needs a base-excited shear-building model")
    config.validate(spec)
    n = config.n_samples
    ss_in, ss_th, ss_noise = np.random.SeedSequence(config.seed, spawn_key=(0,)).spawn(3)
    u = generate_gwn(config.spectral_power, config.dt, n, ss_in)[None, :]
    block_len = max(1, int(round(config.block_seconds / config.dt)))
    n_blocks = -(-n // block_len)
    rng = np.random.default_rng(ss_th)
    mean = np.asarray(config.theta_mean, dtype=float)
    std = np.asarray(config.theta_std, dtype=float)
    thetas = mean + std * rng.standard_normal((n_blocks, mean.size))
    if not all(spec.is_feasible(t) for t in thetas):
        raise InvalidConfig("parameter law produced an infeasible draw")
    clean = _simulate_blocks(spec, thetas, u, config.dt, block_len, config.quantity, (config.observed_dof,))
    y, noise = _add_noise(clean, config.noise_rms_ratio, np.random.default_rng(ss_noise))
    record = TimeHistoryRecord(
        config.dt, u, y, (config.observed_dof,), config.quantity,
        metadata={"source": f"shear-twin:seed={config.seed}", "psd_convention": PSD_CONVENTION},
    )
    if not return_truth:
        return record
    return record, {"block_thetas": thetas, "block_samples": block_len,
                    "noise_std": float(np.std(noise)), "clean": clean, "noise": noise}


def synthesize_prediction_case(config, spec, duration, seed):
    """A fresh event for checking predictions against the generator.

    Draws a new GWN input of ``duration`` seconds and one parameter vector
    from the generator's parameter law, then simulates the clean response
    from rest. For the SDOF generator the truth uses the generator damping.
    Returns ``(u, truth_history, theta_true)``.
    """
    n = int(round(duration / config.dt))
    if n <= 1:
        raise InvalidConfig("prediction horizon shorter than two samples")
    ss_in, ss_th = np.random.SeedSequence(seed, spawn_key=(3,)).spawn(2)
    u = generate_gwn(config.spectral_power, config.dt, n, ss_in)
    rng = np.random.default_rng(ss_th)
    if isinstance(config, GeneratorConfig):
        law = config.frequency_law
        f = law.mean + law.std * rng.standard_normal()
        truth_spec = SdofSpec(law.mean, config.damping_true, spec.mass, spec.excitation)
        theta = np.array([f])
    else:
        mean = np.asarray(config.theta_mean, dtype=float)
        theta = mean + np.asarray(config.theta_std, dtype=float) * rng.standard_normal(mean.size)
        truth_spec = spec
    if not truth_spec.is_feasible(theta):
        raise InvalidConfig("parameter law produced an infeasible draw")
    return u, simulate(truth_spec, theta, None, u, config.dt, n), theta


def split_segments(record, segment_length, n_segments):
    """Cut ``n_segments`` contiguous slices of ``segment_length`` samples from
    the start of the record; any remainder is dropped."""
    segment_length = int(segment_length)
    n_segments = int(n_segments)
    if segment_length <= 0 or n_segments <= 0:
        raise InsufficientData("segment length and count must be positive")
    if segment_length * n_segments > record.n:
        raise InsufficientData(
            f"{n_segments} segments of {segment_length} samples need "
            f"{segment_length * n_segments} samples, record has {record.n}"
        )
    offsets = tuple(i * segment_length for i in range(n_segments))
    segs = [record.slice(o, o + segment_length) for o in offsets]
    return SegmentSet(segs, record.metadata.get("source", ""), offsets)


# -- CSV persistence ---------------------------------------------------------

def save_record(record, path):
    """Write a record as CSV: ``# dt=``/``# channels=`` metadata, header, rows.

    A ``# sensors=`` line is added when the sensor map is not ``0..N_o-1``.
    """
    ni, no = record.n_inputs, record.n_outputs
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# dt={record.dt!r}\n")
        fh.write(f"# channels=u:{ni},y:{no},quantity={_QUANTITY_TAGS[record.quantity]}\n")
        if record.sensor_map != tuple(range(no)):
            fh.write("# sensors=" + ";".join(str(s) for s in record.sensor_map) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"u{i + 1}" for i in range(ni)] + [f"y{j + 1}" for j in range(no)])
        data = np.vstack([record.inputs, record.outputs]).T
        for k, row in enumerate(data):
            w.writerow([format(k * record.dt, ".17g")] + [format(v, ".17g") for v in row])


def _parse_meta(line, lineno):
    body = line[1:].strip()
    if "=" not in body:
        raise ParseError(f"malformed metadata line {line.strip()!r}", lineno, 1)
    key, _, value = body.partition("=")
    return key.strip(), value.strip()


def load_record(path):
    meta = {}
    header = None
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lineno = 0
        for raw in fh:
            lineno += 1
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if header is not None:
                    raise ParseError("metadata after header", lineno, 1)
                k, v = _parse_meta(line, lineno)
                meta[k] = (v, lineno)
                continue
            fields = next(csv.reader([line]))
            if header is None:
                header = [f.strip() for f in fields]
                header_line = lineno
                continue
            if len(fields) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(fields)}", lineno,
                                 min(len(fields), len(header)) + 1)
            vals = []
            for col, f in enumerate(fields, start=1):
                try:
                    vals.append(float(f))
                except ValueError:
                    raise ParseError(f"not a number: {f!r}", lineno, col) from None
            rows.append(vals)

    missing = [k for k in ("dt", "channels") if k not in meta]
    if missing:
        raise SchemaError(f"missing metadata rows: {', '.join(missing)}", missing)
    dt_text, dt_line = meta["dt"]
    try:
        dt = float(dt_text)
    except ValueError:
        raise ParseError(f"bad dt value {dt_text!r}", dt_line, 1) from None
    ch_text, ch_line = meta["channels"]
    try:
        parts = dict(p.split(":", 1) if ":" in p else p.split("=", 1) for p in ch_text.split(","))
        ni, no = int(parts["u"]), int(parts["y"])
        quantity = _TAG_QUANTITIES[parts["quantity"].strip()]
    except (KeyError, ValueError):
        raise ParseError(f"bad channels spec {ch_text!r}", ch_line, 1) from None
    if header is None:
        raise SchemaError("missing header row", ["t"])
    expected = ["t"] + [f"u{i + 1}" for i in range(ni)] + [f"y{j + 1}" for j in range(no)]
    absent = [c for c in expected if c not in header]
    if absent:
        raise SchemaError(f"missing columns: {', '.join(absent)}", absent)
    if header != expected:
        raise ParseError("unexpected column order", header_line, 1)
    sensors = None
    if "sensors" in meta:
        s_text, s_line = meta["sensors"]
        try:
            sensors = tuple(int(s) for s in s_text.split(";"))
        except ValueError:
            raise ParseError(f"bad sensors spec {s_text!r}", s_line, 1) from None
    data = np.array(rows, dtype=float).reshape(-1, len(expected))
    return TimeHistoryRecord(dt, data[:, 1:1 + ni].T, data[:, 1 + ni:].T, sensors, quantity,
                             metadata={"source": str(path)})


def save_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
