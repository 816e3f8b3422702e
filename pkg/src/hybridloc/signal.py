"""Root-raised-cosine pulses and complex baseband synthesis."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


def _rrc(t, period, beta):
    """Unnormalized root-raised-cosine impulse response, singularities by limit."""
    t = np.asarray(t, dtype=float)
    x = t / period
    out = np.empty_like(x)
    at_zero = np.isclose(x, 0.0, atol=1e-12)
    if beta > 0:
        at_sing = np.isclose(np.abs(x), 1.0 / (4.0 * beta), rtol=0, atol=1e-10)
    else:
        at_sing = np.zeros_like(at_zero)
    regular = ~(at_zero | at_sing)
    xr = x[regular]
    num = np.sin(np.pi * xr * (1 - beta)) + 4 * beta * xr * np.cos(np.pi * xr * (1 + beta))
    den = np.pi * xr * (1 - (4 * beta * xr) ** 2)
    out[regular] = num / den
    out[at_zero] = 1.0 - beta + 4.0 * beta / np.pi
    if beta > 0:
        out[at_sing] = beta / np.sqrt(2) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
            + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta)))
    return out


@dataclass(frozen=True)
class Pulse:
    """Energy-normalized pulse sampled symmetrically around t = 0.

    ``samples[half_len]`` is the value at t = 0. Calling the pulse evaluates
    the continuous shape with the same scaling, so fractional delays are
    rendered exactly.
    """

    samples: np.ndarray
    ts: float
    roll_off: float
    bw3db: float
    scale: float

    @property
    def half_len(self) -> int:
        return (len(self.samples) - 1) // 2

    @property
    def period(self) -> float:
        return 1.0 / self.bw3db

    def __call__(self, t):
        return self.scale * _rrc(t, self.period, self.roll_off)

    @property
    def times(self) -> np.ndarray:
        return self.ts * np.arange(-self.half_len, self.half_len + 1)


def rrc_pulse(roll_off: float = 0.6, bw3db: float = 500e6, ts: float = 1.25e-9,
              half_len: int = 40) -> Pulse:
    """Root-raised-cosine pulse; 3-dB bandwidth equals the symbol rate."""
    if not 0.0 <= roll_off <= 1.0:
        raise ValueError("roll_off must lie in [0, 1]")
    if ts <= 0 or bw3db <= 0:
        raise ValueError("ts and bw3db must be positive")
    t = ts * np.arange(-half_len, half_len + 1)
    raw = _rrc(t, 1.0 / bw3db, roll_off)
    scale = 1.0 / np.sqrt(np.sum(raw ** 2))
    return Pulse(raw * scale, float(ts), float(roll_off), float(bw3db), float(scale))


def rms_bandwidth(pulse: Pulse | np.ndarray, ts: float | None = None, padding: int = 8) -> float:
    """Root-mean-squared bandwidth (Hz) from the zero-padded discrete spectrum."""
    if isinstance(pulse, Pulse):
        samples, ts = pulse.samples, pulse.ts
    else:
        samples = np.asarray(pulse)
        if ts is None:
            raise ValueError("ts is required for raw sample arrays")
    if padding < 1:
        raise ValueError("padding must be >= 1")
    n = padding * len(samples)
    power = np.abs(np.fft.fft(samples, n)) ** 2
    if power.sum() <= 0:
        raise ValueError("pulse is identically zero")
    f = np.fft.fftfreq(n, ts)
    return float(np.sqrt(np.sum(f ** 2 * power) / np.sum(power)))


@dataclass(frozen=True)
class BasebandSignal:
    samples: np.ndarray  # complex, (ns,)
    ts: float
    noise_std: float = 1.0

    def __len__(self):
        return len(self.samples)

    @property
    def ns(self) -> int:
        return len(self.samples)


def synthesize(components, ns: int, ts: float, noise_std: float = 1.0, rng=None,
               pulse: Pulse | None = None, noise: bool = True, phases=None) -> BasebandSignal:
    """Sum of delayed, phase-rotated pulses plus circular Gaussian noise.

    Amplitudes are normalized amplitudes (sqrt SNR), so each component is
    scaled by ``u * noise_std``. Phases are drawn uniformly unless given.
    """
    pulse = pulse or rrc_pulse(ts=ts)
    rng = np.random.default_rng() if rng is None else rng
    window = ns * ts
    delays = np.array([c.distance / SPEED_OF_LIGHT for c in components], dtype=float)
    amps = np.array([c.normalized_amplitude for c in components], dtype=float)
    if np.any((delays < 0) | (delays >= window)):
        raise ValueError("component delay outside the observation window")
    if phases is None:
        phases = rng.uniform(0.0, 2 * np.pi, len(components))
    phases = np.asarray(phases, dtype=float)
    t = ts * np.arange(ns)
    r = np.zeros(ns, dtype=complex)
    if len(components):
        shapes = pulse(t[None, :] - delays[:, None])
        r = (amps * noise_std * np.exp(1j * phases)) @ shapes
    if noise:
        w = rng.standard_normal(ns) + 1j * rng.standard_normal(ns)
        r = r + noise_std / np.sqrt(2.0) * w
    return BasebandSignal(r, float(ts), float(noise_std))


_DUMP_MAGIC = b"HLSG"
_DUMP_HEADER = struct.Struct("<4sIIddI")
_DUMP_RECORD = struct.Struct("<II")


def write_signal_dump(path, records, ns: int, ts: float, noise_std: float) -> None:
    """Binary dump of ``(n, j, samples)`` records.

    Layout (little endian): header ``magic[4] version:u32 ns:u32 ts:f64
    noise_std:f64 count:u32`` followed by ``count`` records of ``n:u32 j:u32``
    and ``ns`` complex128 samples.
    """
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(_DUMP_MAGIC, 1, ns, ts, noise_std, len(records)))
        for n, j, samples in records:
            samples = np.asarray(samples, dtype="<c16")
            if samples.shape != (ns,):
                raise ValueError("record length does not match ns")
            fh.write(_DUMP_RECORD.pack(n, j))
            fh.write(samples.tobytes())


def read_signal_dump(path):
    """Inverse of :func:`write_signal_dump`; returns (header dict, records)."""
    with open(path, "rb") as fh:
        magic, version, ns, ts, noise_std, count = _DUMP_HEADER.unpack(fh.read(_DUMP_HEADER.size))
        if magic != _DUMP_MAGIC or version != 1:
            raise ValueError(f"{path}: not a signal dump")
        records = []
        for _ in range(count):
            n, j = _DUMP_RECORD.unpack(fh.read(_DUMP_RECORD.size))
            samples = np.frombuffer(fh.read(16 * ns), dtype="<c16").astype(complex)
            records.append((n, j, samples))
    return {"ns": ns, "ts": ts, "noise_std": noise_std}, records
