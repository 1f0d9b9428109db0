"""Pulse-program IR, canonical sequence builders, and the compiler.

Timing convention: every event start is an absolute DAC sample index.  CPMG
delays are defined between pulse *centers* (and the centers of the bracketing
pi/2 pulses), so finite pulse lengths are absorbed symmetrically and the free
evolution adds up to exactly 2*N*tau.

Compilation walks events in time order with a sequencer-cycle cursor.  Each
microwave pulse costs ``pulse_overhead_cycles`` of register staging charged at
its trigger; the emitted coarse wait is therefore
``target_cycle - cursor - overhead``.  Marker (laser / readout TTL) edges ride
the same coarse timeline but have no fine offset and no staging cost.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .clockdomain import ClockConfig, decompose
from .errors import BadN, FinepulseError, GapTooSmall, MissingBank, TimingError, UnschedulableTau
from .waveform import ChannelLayout, phase_to_word

# Marker channel assignments for trigger-marker instructions.
MARKER_LASER = 0
MARKER_READOUT = 1

_X = 0.0
_Y = np.pi / 2.0
# Phase-alternating pattern: X-Y-X-Y-Y-X-Y-X, repeated.
XY8_PHASES = (_X, _Y, _X, _Y, _Y, _X, _Y, _X)


class PulseKind(enum.Enum):
    MW_PULSE = "mw-pulse"
    LASER_GATE = "laser-gate"
    READOUT_WINDOW = "readout-window"


class Pattern(enum.Enum):
    XY8 = "xy8"
    ALL_X = "all-x"


class Opcode(enum.Enum):
    SET_FREQ = "SET-FREQ"
    SET_PHASE = "SET-PHASE"
    SET_AMP = "SET-AMP"
    SELECT_WAVEFORM = "SELECT-WAVEFORM"
    WAIT_COARSE = "WAIT-COARSE"
    TRIGGER_PULSE = "TRIGGER-PULSE"
    TRIGGER_MARKER = "TRIGGER-MARKER"


@dataclass(frozen=True)
class PulseEvent:
    kind: PulseKind
    start_samples: int
    duration_samples: int
    phase: float = 0.0
    bank_id: str | None = None

    def __post_init__(self):
        if self.start_samples < 0:
            raise TimingError("event start must be non-negative")
        if self.duration_samples < 1:
            raise TimingError("event duration must be positive")
        if self.kind is PulseKind.MW_PULSE and self.bank_id is None:
            raise FinepulseError("mw pulses must reference a waveform bank")

    @property
    def end_samples(self) -> int:
        return self.start_samples + self.duration_samples

    @property
    def channel(self) -> str:
        return "mw" if self.kind is PulseKind.MW_PULSE else f"marker{self.marker_channel}"

    @property
    def marker_channel(self) -> int:
        if self.kind is PulseKind.LASER_GATE:
            return MARKER_LASER
        if self.kind is PulseKind.READOUT_WINDOW:
            return MARKER_READOUT
        raise FinepulseError("mw pulses have no marker channel")


@dataclass(frozen=True)
class PulseProgram:
    events: tuple[PulseEvent, ...]
    clock: ClockConfig
    label: str = ""
    sweep_value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        starts = [e.start_samples for e in self.events]
        if starts != sorted(starts):
            raise TimingError("events must be sorted by start time")
        by_channel: dict[str, int] = {}
        for e in self.events:
            prev_end = by_channel.get(e.channel, 0)
            if e.start_samples < prev_end:
                raise TimingError(
                    f"overlapping events on channel {e.channel} at sample {e.start_samples}"
                )
            by_channel[e.channel] = e.end_samples

    @property
    def mw_events(self) -> tuple[PulseEvent, ...]:
        return tuple(e for e in self.events if e.kind is PulseKind.MW_PULSE)

    @property
    def duration_samples(self) -> int:
        return max((e.end_samples for e in self.events), default=0)


@dataclass(frozen=True)
class CpmgSpec:
    """Parameters of one CPMG program: N tau-pi-tau units inside pi/2 brackets."""

    n_pulses: int
    tau_samples: int
    pi_bank: str
    pi2_bank: str
    pi_len: int
    pi2_len: int
    pattern: Pattern = Pattern.XY8

    def __post_init__(self):
        if self.n_pulses < 1:
            raise BadN(f"n_pulses must be >= 1, got {self.n_pulses}")
        if self.pattern is Pattern.XY8 and self.n_pulses % 8:
            raise BadN(f"xy8 pattern needs N divisible by 8, got {self.n_pulses}")
        if self.tau_samples < 1:
            raise UnschedulableTau(f"tau must be positive, got {self.tau_samples}")
        if self.pi_len < 1 or self.pi2_len < 1:
            raise FinepulseError("pulse lengths must be positive")

    def phases(self) -> list[float]:
        if self.pattern is Pattern.XY8:
            return [XY8_PHASES[k % 8] for k in range(self.n_pulses)]
        # Meiboom-Gill: preparation about X, refocusing about Y.
        return [_Y] * self.n_pulses


@dataclass(frozen=True)
class ScaffoldSpec:
    """Optical init/readout scaffolding added around the microwave block.

    All values are sequencer cycles; marker channels are cycle-granular.
    """

    init_cycles: int = 922      # ~3 us of green laser
    settle_cycles: int = 308    # ~1 us laser-to-mw gap
    readout_cycles: int = 123   # ~400 ns photon-counting window
    readout_laser_cycles: int = 922

    def __post_init__(self):
        if min(self.init_cycles, self.settle_cycles, self.readout_cycles,
               self.readout_laser_cycles) < 0:
            raise TimingError("scaffold durations must be non-negative")


def _scaffolded(
    mw_events: list[PulseEvent],
    clock: ClockConfig,
    scaffold: ScaffoldSpec | None,
    label: str,
    sweep_value: float | None,
) -> PulseProgram:
    """Wrap mw events with init laser and readout markers."""
    events: list[PulseEvent] = []
    ratio = clock.ratio
    if scaffold is not None and scaffold.init_cycles > 0:
        events.append(
            PulseEvent(PulseKind.LASER_GATE, 0, scaffold.init_cycles * ratio)
        )
    events.extend(mw_events)
    if scaffold is not None:
        end = max((e.end_samples for e in mw_events), default=0)
        # Round the readout start up to a cycle boundary past the settle gap.
        ro_start = -(-end // ratio) * ratio + scaffold.settle_cycles * ratio
        if scaffold.readout_laser_cycles > 0:
            events.append(
                PulseEvent(PulseKind.LASER_GATE, ro_start, scaffold.readout_laser_cycles * ratio)
            )
        if scaffold.readout_cycles > 0:
            events.append(
                PulseEvent(PulseKind.READOUT_WINDOW, ro_start, scaffold.readout_cycles * ratio)
            )
    events.sort(key=lambda e: (e.start_samples, e.channel))
    return PulseProgram(events=tuple(events), clock=clock, label=label, sweep_value=sweep_value)


def _mw_start(clock: ClockConfig, scaffold: ScaffoldSpec | None) -> int:
    if scaffold is None:
        return clock.overhead_samples
    return (scaffold.init_cycles + scaffold.settle_cycles) * clock.ratio


def build_cpmg(
    spec: CpmgSpec,
    clock: ClockConfig,
    scaffold: ScaffoldSpec | None = ScaffoldSpec(),
    final_pi2_phase: float = _X,
) -> PulseProgram:
    """Lay out pi/2 . (tau pi tau)^N . pi/2 with center-referenced delays.

    The k-th pi-pulse center sits (2k-1)*tau after the opening pi/2 center, so
    edge gaps are tau (or 2*tau) minus half the adjacent pulse lengths.  When
    the pi and pi/2 lengths differ in parity the half-sample remainder is
    floored toward the sequence start.
    """
    tau = spec.tau_samples
    l_pi = spec.pi_len
    l_pi2 = spec.pi2_len
    overhead = clock.overhead_samples
    if 2 * tau < l_pi + overhead:
        raise UnschedulableTau(
            f"2*tau = {2 * tau} samples cannot hold a {l_pi}-sample pi pulse "
            f"plus {overhead} samples of instruction overhead"
        )
    if 2 * tau < l_pi + l_pi2:
        raise UnschedulableTau(
            f"tau = {tau} samples would overlap the pi/2 and pi envelopes"
        )
    t0 = _mw_start(clock, scaffold)
    events = [
        PulseEvent(PulseKind.MW_PULSE, t0, l_pi2, phase=_X, bank_id=spec.pi2_bank)
    ]
    center_offset = (l_pi2 - l_pi) // 2
    phases = spec.phases()
    for k in range(1, spec.n_pulses + 1):
        start = t0 + center_offset + (2 * k - 1) * tau
        events.append(
            PulseEvent(PulseKind.MW_PULSE, start, l_pi, phase=phases[k - 1], bank_id=spec.pi_bank)
        )
    close = t0 + 2 * spec.n_pulses * tau
    events.append(
        PulseEvent(PulseKind.MW_PULSE, close, l_pi2, phase=final_pi2_phase, bank_id=spec.pi2_bank)
    )
    return _scaffolded(
        events, clock, scaffold,
        label=f"cpmg{spec.n_pulses}-{spec.pattern.value}", sweep_value=float(tau),
    )


def build_rabi(
    durations_samples: list[int],
    clock: ClockConfig,
    scaffold: ScaffoldSpec | None = ScaffoldSpec(),
    bank_prefix: str = "rabi",
    phase: float = _X,
) -> list[PulseProgram]:
    """One program per drive duration; bank ids follow '<prefix>_<n>'."""
    _check_sweep(durations_samples)
    t0 = _mw_start(clock, scaffold)
    programs = []
    for d in durations_samples:
        ev = [PulseEvent(PulseKind.MW_PULSE, t0, d, phase=phase, bank_id=f"{bank_prefix}_{d}")]
        programs.append(_scaffolded(ev, clock, scaffold, label="rabi", sweep_value=float(d)))
    return programs


def build_t1(
    waits_samples: list[int],
    clock: ClockConfig,
    scaffold: ScaffoldSpec = ScaffoldSpec(),
) -> list[PulseProgram]:
    """Relaxation sweep: init laser, variable dark wait, readout; no mw drive.

    Marker channels are cycle-granular, so the wait rounds up to whole
    cycles; the init-to-readout gap at zero wait is just the per-pulse
    overhead.
    """
    _check_sweep(waits_samples, allow_zero=True)
    ratio = clock.ratio
    programs = []
    for w in waits_samples:
        wait_cycles = -(-w // ratio)
        ro = (scaffold.init_cycles + clock.pulse_overhead_cycles + wait_cycles) * ratio
        events = [PulseEvent(PulseKind.LASER_GATE, 0, scaffold.init_cycles * ratio)]
        if scaffold.readout_laser_cycles > 0:
            events.append(
                PulseEvent(PulseKind.LASER_GATE, ro, scaffold.readout_laser_cycles * ratio)
            )
        if scaffold.readout_cycles > 0:
            events.append(PulseEvent(PulseKind.READOUT_WINDOW, ro, scaffold.readout_cycles * ratio))
        programs.append(
            PulseProgram(events=tuple(events), clock=clock, label="t1", sweep_value=float(w))
        )
    return programs


def build_hahn(
    tau_sweep_samples: list[int],
    clock: ClockConfig,
    pi_bank: str,
    pi2_bank: str,
    pi_len: int,
    pi2_len: int,
    scaffold: ScaffoldSpec | None = ScaffoldSpec(),
) -> list[PulseProgram]:
    """Hahn echo is CPMG with a single refocusing pulse."""
    _check_sweep(tau_sweep_samples)
    programs = []
    for tau in tau_sweep_samples:
        spec = CpmgSpec(
            n_pulses=1, tau_samples=tau, pi_bank=pi_bank, pi2_bank=pi2_bank,
            pi_len=pi_len, pi2_len=pi2_len, pattern=Pattern.ALL_X,
        )
        prog = build_cpmg(spec, clock, scaffold)
        programs.append(replace(prog, label="hahn"))
    return programs


def _check_sweep(values: list[int], allow_zero: bool = False) -> None:
    if not values:
        raise FinepulseError("sweep must contain at least one point")
    lo = 0 if allow_zero else 1
    if any(v < lo for v in values):
        raise FinepulseError(f"sweep values must be >= {lo}")
    if list(values) != sorted(values):
        raise FinepulseError("sweep values must be sorted ascending")


@dataclass(frozen=True)
class Instruction:
    op: Opcode
    arg: int

    def __str__(self) -> str:
        return f"{self.op.value} {self.arg}"


@dataclass(frozen=True)
class CompiledProgram:
    instructions: tuple[Instruction, ...]
    layout: ChannelLayout
    predicted_edges: tuple[int, ...]
    clock: ClockConfig
    duration_samples: int

    def to_text(self) -> str:
        return "\n".join(str(i) for i in self.instructions) + "\n"

    @staticmethod
    def parse_text(text: str) -> list[Instruction]:
        out = []
        for ln, line in enumerate(text.strip().splitlines(), start=1):
            parts = line.split()
            if len(parts) != 2:
                raise FinepulseError(f"line {ln}: expected 'OP ARG', got {line!r}")
            try:
                out.append(Instruction(Opcode(parts[0]), int(parts[1])))
            except ValueError as exc:
                raise FinepulseError(f"line {ln}: {exc}") from exc
        return out


def compile_program(
    prog: PulseProgram,
    layout: ChannelLayout,
    freq_word: int = 0,
    amp: int = 32767,
) -> CompiledProgram:
    """Lower a PulseProgram to the sequencer instruction stream.

    Per mw pulse: stage phase/waveform registers, wait the decomposed coarse
    delay (minus the staging overhead), then trigger; the shifted-copy index
    carries the fine delay.  Predicted edges are the requested absolute
    starts, which playback must hit exactly.
    """
    clock = prog.clock
    overhead = clock.pulse_overhead_cycles
    for e in prog.mw_events:
        if e.bank_id not in layout.banks:
            raise MissingBank(f"bank {e.bank_id!r} not present in channel layout")
        bank = layout.banks[e.bank_id]
        if e.duration_samples > bank.base.length_samples:
            raise MissingBank(
                f"bank {e.bank_id!r} holds {bank.base.length_samples} samples, "
                f"pulse wants {e.duration_samples}"
            )

    # Issue order: mw staging begins `overhead` cycles before its trigger.
    items = []
    for seq, e in enumerate(prog.events):
        if e.kind is PulseKind.MW_PULSE:
            spec = decompose(e.start_samples, clock)
            items.append((spec.coarse - overhead, 1, seq, e, spec))
        else:
            if e.start_samples % clock.ratio or e.end_samples % clock.ratio:
                raise TimingError("marker edges must lie on sequencer cycle boundaries")
            # Marker toggles are instantaneous; at a tied cycle they go first.
            items.append((e.start_samples // clock.ratio, 0, seq, e, None))
            items.append((e.end_samples // clock.ratio, 0, seq, e, None))
    items.sort(key=lambda it: (it[0], it[1], it[2]))

    instructions: list[Instruction] = [
        Instruction(Opcode.SET_FREQ, freq_word),
        Instruction(Opcode.SET_AMP, amp),
    ]
    predicted: list[int] = []
    cursor = 0
    phase_word_reg: int | None = None
    for issue_cycle, _, _, e, spec in items:
        if e.kind is PulseKind.MW_PULSE:
            wait = spec.coarse - cursor - overhead
            if wait < 0:
                raise GapTooSmall(
                    f"pulse at sample {e.start_samples} needs {overhead} staging cycles "
                    f"but only {spec.coarse - cursor} are available"
                )
            pw = phase_to_word(e.phase)
            if pw != phase_word_reg:
                instructions.append(Instruction(Opcode.SET_PHASE, pw))
                phase_word_reg = pw
            instructions.append(Instruction(Opcode.SELECT_WAVEFORM, spec.fine))
            instructions.append(Instruction(Opcode.WAIT_COARSE, wait))
            instructions.append(Instruction(Opcode.TRIGGER_PULSE, layout.index_of(e.bank_id)))
            predicted.append(e.start_samples)
            cursor = spec.coarse
        else:
            wait = issue_cycle - cursor
            if wait < 0:
                raise GapTooSmall(
                    f"marker edge at cycle {issue_cycle} conflicts with staging at {cursor}"
                )
            if wait > 0:
                instructions.append(Instruction(Opcode.WAIT_COARSE, wait))
            instructions.append(Instruction(Opcode.TRIGGER_MARKER, e.marker_channel))
            cursor = issue_cycle

    duration = prog.duration_samples + 4 * clock.ratio
    return CompiledProgram(
        instructions=tuple(instructions),
        layout=layout,
        predicted_edges=tuple(predicted),
        clock=clock,
        duration_samples=duration,
    )
