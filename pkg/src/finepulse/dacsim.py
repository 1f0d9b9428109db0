"""Sample-exact playback model of the compiled instruction stream.

The renderer executes instructions on a sequencer-cycle cursor: coarse waits
advance it, a pulse trigger first consumes the staging overhead and then
starts the selected shifted copy at the resulting cycle boundary.  The copy's
leading zeros realize the fine delay, so envelope energy appears at exactly
the absolute sample the compiler predicted.

The carrier is a 32-bit phase accumulator that never resets; the per-pulse
phase register adds on top.  Output is I*cos(theta) - Q*sin(theta) in 16-bit
LSB units.  The stream also carries the quadrature-mixed shadow
(I*sin + Q*cos), which is not a DAC output but lets edge measurement recover
the envelope magnitude exactly at every sample regardless of carrier phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clockdomain import ClockConfig
from .errors import NoEdges, StreamOverflow, UnknownBank
from .sequencer import CompiledProgram, Opcode
from .waveform import FULL_SCALE, PHASE_MOD

MAX_STREAM_SAMPLES = 50_000_000


@dataclass
class SampleStream:
    """Rendered DAC output plus measurement aids."""

    samples: np.ndarray          # real mixed output, 16-bit LSB units
    rate_hz: int
    quadrature: np.ndarray | None = None
    marker_edges: dict[int, list[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def envelope_magnitude(self) -> np.ndarray:
        if self.quadrature is None:
            return np.abs(self.samples)
        return np.hypot(self.samples, self.quadrature)

    def to_int16(self) -> np.ndarray:
        return np.clip(np.rint(self.samples), -32768, 32767).astype("<i2")

    def write_bin(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_int16().tobytes())

    def write_csv(self, path: str | Path) -> None:
        data = self.to_int16()
        with open(path, "w") as fh:
            fh.write("index,value\n")
            for i, v in enumerate(data):
                fh.write(f"{i},{v}\n")


@dataclass(frozen=True)
class EdgeReport:
    """Measured pulse-start samples and their sub-cycle residues."""

    measured_starts: tuple[int, ...]
    residues: tuple[int, ...]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("start_sample,residue\n")
            for s, r in zip(self.measured_starts, self.residues):
                fh.write(f"{s},{r}\n")


def render(prog: CompiledProgram, max_samples: int = MAX_STREAM_SAMPLES) -> SampleStream:
    """Execute the instruction stream into a sample-accurate output record."""
    n_total = prog.duration_samples
    if n_total > max_samples:
        raise StreamOverflow(
            f"program spans {n_total} samples, above the configured cap {max_samples}"
        )
    clock = prog.clock
    ratio = clock.ratio
    overhead = clock.pulse_overhead_cycles
    out = np.zeros(n_total, dtype=np.float64)
    quad = np.zeros(n_total, dtype=np.float64)
    markers: dict[int, list[int]] = {}

    order = prog.layout.order
    cursor = 0                 # sequencer cycles
    freq_word = 0
    phase_word = 0
    amp = FULL_SCALE
    selected_fine = 0
    # Phase accumulator bookkeeping: word(n) = acc_ref + freq_word*(n - n_ref).
    acc_ref = 0
    n_ref = 0

    def accumulator_at(n: int) -> int:
        return (acc_ref + freq_word * (n - n_ref)) % PHASE_MOD

    for ins in prog.instructions:
        if ins.op is Opcode.WAIT_COARSE:
            cursor += ins.arg
        elif ins.op is Opcode.SET_FREQ:
            n_now = cursor * ratio
            acc_ref = accumulator_at(n_now)
            n_ref = n_now
            freq_word = ins.arg % PHASE_MOD
        elif ins.op is Opcode.SET_PHASE:
            phase_word = ins.arg % PHASE_MOD
        elif ins.op is Opcode.SET_AMP:
            amp = ins.arg
        elif ins.op is Opcode.SELECT_WAVEFORM:
            if not 0 <= ins.arg < ratio:
                raise UnknownBank(f"waveform copy index {ins.arg} outside [0, {ratio})")
            selected_fine = ins.arg
        elif ins.op is Opcode.TRIGGER_MARKER:
            cycle = cursor
            markers.setdefault(ins.arg, []).append(cycle * ratio)
        elif ins.op is Opcode.TRIGGER_PULSE:
            if not 0 <= ins.arg < len(order):
                raise UnknownBank(f"bank index {ins.arg} outside the layout")
            bank = prog.layout.banks[order[ins.arg]]
            cursor += overhead
            start = cursor * ratio
            rep = bank.replicas[selected_fine]
            length = bank.padded_length
            if start + length > n_total:
                raise StreamOverflow(
                    f"pulse at sample {start} overruns the {n_total}-sample stream"
                )
            words = (accumulator_at(start)
                     + freq_word * np.arange(length, dtype=np.int64)
                     + phase_word) % PHASE_MOD
            theta = words * (2.0 * np.pi / PHASE_MOD)
            c = np.cos(theta)
            s = np.sin(theta)
            scale = amp / FULL_SCALE
            i_env = rep.i_samples.astype(np.float64)
            q_env = rep.q_samples.astype(np.float64)
            out[start : start + length] += scale * (i_env * c - q_env * s)
            quad[start : start + length] += scale * (i_env * s + q_env * c)
        else:  # pragma: no cover - enum is closed
            raise UnknownBank(f"unhandled opcode {ins.op}")

    return SampleStream(samples=out, rate_hz=clock.dac_rate_hz, quadrature=quad,
                        marker_edges=markers)


def measure_edges(
    stream: SampleStream,
    threshold: float = 0.5,
    cfg: ClockConfig | None = None,
) -> EdgeReport:
    """Locate pulse starts: first sample whose envelope magnitude crosses
    threshold (fraction of full scale) after a below-threshold gap."""
    if not 0.0 < threshold < 1.0:
        raise NoEdges(f"threshold must be in (0, 1), got {threshold}")
    mag = stream.envelope_magnitude()
    above = mag >= threshold * FULL_SCALE
    if not above.any():
        raise NoEdges("stream contains no above-threshold samples")
    rising = above & ~np.concatenate(([False], above[:-1]))
    starts = np.flatnonzero(rising)
    ratio = cfg.ratio if cfg is not None else ClockConfig().ratio
    return EdgeReport(
        measured_starts=tuple(int(s) for s in starts),
        residues=tuple(int(s % ratio) for s in starts),
    )
