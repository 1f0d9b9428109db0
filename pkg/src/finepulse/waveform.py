"""Pulse envelopes, the sample-shifted waveform bank, and NCO phase words.

A bank holds ratio-many copies of one envelope, copy ``r`` delayed by ``r``
DAC samples.  Selecting copy ``r`` at playback realizes the fine part of a
delay without touching the sequencer schedule.  All copies share one padded
length (a whole number of sequencer words) so bank memory addressing stays
uniform; the per-channel budget is 2**16 samples.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .clockdomain import ClockConfig
from .errors import BudgetExceeded, FinepulseError, TimingError

FULL_SCALE = 32767  # symmetric 16-bit quadrature amplitude
CHANNEL_CAPACITY = 65536  # samples per DAC channel
PHASE_BITS = 32
PHASE_MOD = 1 << PHASE_BITS


class Shape(enum.Enum):
    CONSTANT = "constant"
    GAUSSIAN_EDGED = "gaussian-edged"


class PhaseMode(enum.Enum):
    NCO_REGISTER = "nco-register"
    IQ_ENCODED = "iq-encoded"


@dataclass(frozen=True)
class PhaseControl:
    """Which mechanism sets the carrier phase of a pulse.

    The NCO register path costs no waveform memory and has 2*pi/2**32 phase
    granularity; the I/Q path bakes the phase into the 16-bit envelope.
    """

    mode: PhaseMode = PhaseMode.NCO_REGISTER
    nco_phase_word: int = 0
    nco_freq_word: int = 0

    def __post_init__(self):
        for name in ("nco_phase_word", "nco_freq_word"):
            w = getattr(self, name)
            if not 0 <= w < PHASE_MOD:
                raise TimingError(f"{name} must be a 32-bit unsigned value, got {w}")


def _quantize(values: np.ndarray) -> np.ndarray:
    """Round half away from zero onto the symmetric +/-32767 grid."""
    v = np.asarray(values, dtype=float)
    q = np.copysign(np.floor(np.abs(v) + 0.5), v)
    return np.clip(q, -FULL_SCALE, FULL_SCALE).astype(np.int16)


@dataclass(frozen=True)
class Envelope:
    """One pulse shape as signed 16-bit I/Q sample arrays."""

    i_samples: np.ndarray
    q_samples: np.ndarray
    shape: Shape = Shape.CONSTANT

    def __post_init__(self):
        i = np.asarray(self.i_samples, dtype=np.int16)
        q = np.asarray(self.q_samples, dtype=np.int16)
        if i.ndim != 1 or q.ndim != 1 or len(i) != len(q):
            raise FinepulseError("I and Q sample arrays must be 1-D and equal length")
        if len(i) == 0:
            raise FinepulseError("envelope must contain at least one sample")
        object.__setattr__(self, "i_samples", i)
        object.__setattr__(self, "q_samples", q)

    @property
    def length_samples(self) -> int:
        return len(self.i_samples)


def make_envelope(
    duration_samples: int,
    amplitude: float,
    phase: float = 0.0,
    shape: Shape = Shape.CONSTANT,
    edge_samples: int | None = None,
) -> Envelope:
    """Build an envelope at a fixed amplitude fraction and phase.

    ``amplitude`` is a fraction of full scale in [0, 1]; ``phase`` rotates the
    I/Q split.  Gaussian-edged pulses ramp over ``edge_samples`` (default a
    quarter of the duration) with sigma = edge/2.
    """
    if duration_samples < 1:
        raise FinepulseError(f"duration must be >= 1 sample, got {duration_samples}")
    if not 0.0 <= amplitude <= 1.0:
        raise FinepulseError(f"amplitude must be in [0, 1], got {amplitude}")
    profile = np.ones(duration_samples)
    if shape is Shape.GAUSSIAN_EDGED:
        edge = duration_samples // 4 if edge_samples is None else int(edge_samples)
        edge = max(0, min(edge, duration_samples // 2))
        if edge > 0:
            sigma = edge / 2.0
            n = np.arange(edge)
            rise = np.exp(-((n - edge) ** 2) / (2.0 * sigma**2))
            profile[:edge] = rise
            profile[duration_samples - edge:] = rise[::-1]
    i = _quantize(profile * amplitude * np.cos(phase) * FULL_SCALE)
    q = _quantize(profile * amplitude * np.sin(phase) * FULL_SCALE)
    return Envelope(i_samples=i, q_samples=q, shape=shape)


@dataclass(frozen=True)
class WaveformBank:
    """ratio-many sample-shifted copies of one base envelope.

    Copy ``r`` starts with exactly ``r`` zero samples followed by the base
    envelope; all copies are zero-padded to ``padded_length`` (a multiple of
    the clock ratio).
    """

    base: Envelope
    replicas: tuple[Envelope, ...]
    padded_length: int
    ratio: int

    @property
    def total_samples(self) -> int:
        return self.ratio * self.padded_length


def build_bank(base: Envelope, cfg: ClockConfig) -> WaveformBank:
    """Construct the shifted-copy bank for one envelope."""
    ratio = cfg.ratio
    needed = base.length_samples + (ratio - 1)
    padded = -(-needed // ratio) * ratio
    replicas = []
    for r in range(ratio):
        i = np.zeros(padded, dtype=np.int16)
        q = np.zeros(padded, dtype=np.int16)
        i[r : r + base.length_samples] = base.i_samples
        q[r : r + base.length_samples] = base.q_samples
        replicas.append(Envelope(i_samples=i, q_samples=q, shape=base.shape))
    return WaveformBank(base=base, replicas=tuple(replicas), padded_length=padded, ratio=ratio)


@dataclass(frozen=True)
class ChannelLayout:
    """Assignment of banks to contiguous offsets in one channel's memory."""

    banks: dict[str, WaveformBank]
    offsets: dict[str, int]
    capacity: int = CHANNEL_CAPACITY
    order: tuple[str, ...] = field(default_factory=tuple)

    @property
    def total_samples(self) -> int:
        return sum(b.total_samples for b in self.banks.values())

    def index_of(self, bank_id: str) -> int:
        return self.order.index(bank_id)


def allocate_channel(
    banks: Mapping[str, WaveformBank], capacity: int = CHANNEL_CAPACITY
) -> ChannelLayout:
    """Pack banks into channel memory; raise BudgetExceeded on overflow."""
    if not banks:
        raise FinepulseError("cannot allocate an empty bank set")
    total = sum(b.total_samples for b in banks.values())
    if total > capacity:
        raise BudgetExceeded(requested=total, capacity=capacity)
    offsets: dict[str, int] = {}
    cursor = 0
    for name, bank in banks.items():
        offsets[name] = cursor
        cursor += bank.total_samples
    return ChannelLayout(
        banks=dict(banks), offsets=offsets, capacity=capacity, order=tuple(banks.keys())
    )


def nco_phase_advance(freq_word: int, n_samples: int) -> int:
    """Phase-accumulator state after n samples at a given frequency word."""
    return (freq_word * n_samples) % PHASE_MOD


def phase_to_word(phase_rad: float) -> int:
    """Quantize a phase in radians onto the 32-bit register grid."""
    return int(round(phase_rad / (2.0 * np.pi) * PHASE_MOD)) % PHASE_MOD


def word_to_phase(word: int) -> float:
    return (word % PHASE_MOD) * 2.0 * np.pi / PHASE_MOD


def freq_to_word(freq_hz: float, cfg: ClockConfig) -> int:
    """Quantize a carrier frequency onto the 32-bit accumulator grid."""
    return int(round(freq_hz / cfg.dac_rate_hz * PHASE_MOD)) % PHASE_MOD


def export_channel(layout: ChannelLayout, bin_path: str | Path, meta_path: str | Path) -> None:
    """Write bank memory as little-endian int16 interleaved I/Q plus metadata.

    The binary holds each bank's copies in offset order; the sidecar records
    enough structure to reslice it.
    """
    bin_path = Path(bin_path)
    meta_path = Path(meta_path)
    with open(bin_path, "wb") as fh:
        for name in layout.order:
            bank = layout.banks[name]
            for rep in bank.replicas:
                inter = np.empty(2 * bank.padded_length, dtype="<i2")
                inter[0::2] = rep.i_samples
                inter[1::2] = rep.q_samples
                fh.write(inter.tobytes())
    meta = {
        "capacity": layout.capacity,
        "ratio": next(iter(layout.banks.values())).ratio,
        "banks": [
            {
                "id": name,
                "offset": layout.offsets[name],
                "padded_length": layout.banks[name].padded_length,
                "base_length": layout.banks[name].base.length_samples,
            }
            for name in layout.order
        ],
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
