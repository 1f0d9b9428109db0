import numpy as np
import pytest

from finepulse.clockdomain import ClockConfig
from finepulse.errors import BadN, GapTooSmall, MissingBank, UnschedulableTau
from finepulse.sequencer import (
    CompiledProgram,
    CpmgSpec,
    Instruction,
    Opcode,
    Pattern,
    PulseEvent,
    PulseKind,
    PulseProgram,
    ScaffoldSpec,
    build_cpmg,
    build_hahn,
    build_rabi,
    build_t1,
    compile_program,
)
from finepulse.waveform import allocate_channel, build_bank, make_envelope, phase_to_word

CFG = ClockConfig()
PI_LEN, PI2_LEN = 268, 134


def _layout():
    return allocate_channel(
        {
            "pi": build_bank(make_envelope(PI_LEN, 1.0, 0.0), CFG),
            "pi2": build_bank(make_envelope(PI2_LEN, 1.0, 0.0), CFG),
        }
    )


def _spec(n=32, tau=2444, pattern=Pattern.XY8):
    return CpmgSpec(
        n_pulses=n, tau_samples=tau, pi_bank="pi", pi2_bank="pi2",
        pi_len=PI_LEN, pi2_len=PI2_LEN, pattern=pattern,
    )


def test_xy8_phase_list():
    spec = _spec(n=32)
    phases = spec.phases()
    x, y = 0.0, np.pi / 2
    assert phases == [x, y, x, y, y, x, y, x] * 4


def test_all_x_pattern_uses_y_refocusing():
    # Meiboom-Gill convention: pi/2 about X, pi pulses about Y
    spec = _spec(n=4, pattern=Pattern.ALL_X)
    assert spec.phases() == [np.pi / 2] * 4


def test_xy8_requires_multiple_of_eight():
    with pytest.raises(BadN):
        _spec(n=12)


def test_unschedulable_tau_rejected():
    with pytest.raises(UnschedulableTau):
        build_cpmg(_spec(n=8, tau=PI_LEN // 2), CFG)


def test_cpmg_center_based_timing():
    tau = 2444
    prog = build_cpmg(_spec(n=32, tau=tau), CFG)
    mw = prog.mw_events
    assert len(mw) == 34
    t0 = mw[0].start_samples
    offset = (PI2_LEN - PI_LEN) // 2
    for k in range(1, 33):
        assert mw[k].start_samples == t0 + offset + (2 * k - 1) * tau
    # closing pi/2 lands exactly 2*N*tau after the opener
    assert mw[-1].start_samples == t0 + 2 * 32 * tau
    # free-evolution between pulse centers is tau, 2tau, ..., 2tau, tau
    centers = [e.start_samples + e.duration_samples / 2 for e in mw]
    gaps = np.diff(centers)
    assert gaps[0] == pytest.approx(tau)
    assert all(g == pytest.approx(2 * tau) for g in gaps[1:-1])
    assert gaps[-1] == pytest.approx(tau)


def test_cpmg_total_duration_analytic():
    tau = 2444
    prog = build_cpmg(_spec(n=32, tau=tau), CFG)
    mw = prog.mw_events
    t0 = mw[0].start_samples
    assert mw[-1].start_samples + mw[-1].duration_samples == t0 + 2 * 32 * tau + PI2_LEN


def test_scaffold_markers_present_and_cycle_aligned():
    prog = build_cpmg(_spec(), CFG)
    markers = [e for e in prog.events if e.kind is not PulseKind.MW_PULSE]
    assert any(e.kind is PulseKind.LASER_GATE for e in markers)
    assert any(e.kind is PulseKind.READOUT_WINDOW for e in markers)
    for e in markers:
        assert e.start_samples % CFG.ratio == 0
        assert e.duration_samples % CFG.ratio == 0


def test_rabi_sweep_durations_increase():
    progs = build_rabi(list(range(1, 101)), CFG)
    assert len(progs) == 100
    durations = [p.mw_events[0].duration_samples for p in progs]
    assert durations == list(range(1, 101))
    assert all(p.mw_events[0].bank_id == f"rabi_{d}"
               for p, d in zip(progs, durations))


def test_hahn_equals_cpmg_n1():
    taus = [3000, 4000]
    hahn = build_hahn(taus, CFG, "pi", "pi2", PI_LEN, PI2_LEN)
    for prog, tau in zip(hahn, taus):
        ref = build_cpmg(_spec(n=1, tau=tau, pattern=Pattern.ALL_X), CFG)
        assert prog.events == ref.events


def test_t1_zero_wait_gap_is_overhead_only():
    scaffold = ScaffoldSpec()
    progs = build_t1([0], CFG, scaffold)
    events = progs[0].events
    init = events[0]
    ro = events[1]
    assert init.kind is PulseKind.LASER_GATE
    assert ro.start_samples == init.end_samples + CFG.overhead_samples


def test_program_rejects_overlap():
    with pytest.raises(Exception):
        PulseProgram(
            events=(
                PulseEvent(PulseKind.MW_PULSE, 100, 50, bank_id="pi"),
                PulseEvent(PulseKind.MW_PULSE, 120, 50, bank_id="pi"),
            ),
            clock=CFG,
        )


def test_compile_single_pulse_instruction_stream():
    layout = _layout()
    prog = PulseProgram(
        events=(PulseEvent(PulseKind.MW_PULSE, 52, PI_LEN, bank_id="pi"),),
        clock=CFG,
    )
    compiled = compile_program(prog, layout)
    ops = [(i.op, i.arg) for i in compiled.instructions]
    assert (Opcode.SELECT_WAVEFORM, 4) in ops
    # coarse 3 minus the 2-cycle staging overhead
    assert (Opcode.WAIT_COARSE, 1) in ops
    assert ops[-1] == (Opcode.TRIGGER_PULSE, layout.index_of("pi"))
    assert compiled.predicted_edges == (52,)


def test_compile_gap_exactly_overhead_gives_zero_wait():
    layout = _layout()
    gap = CFG.overhead_samples  # coarse trigger-to-trigger spacing
    first = CFG.overhead_samples
    prog = PulseProgram(
        events=(
            PulseEvent(PulseKind.MW_PULSE, first, 16, bank_id="pi"),
            PulseEvent(PulseKind.MW_PULSE, first + gap, 16, bank_id="pi"),
        ),
        clock=CFG,
    )
    compiled = compile_program(prog, layout)
    waits = [i.arg for i in compiled.instructions if i.op is Opcode.WAIT_COARSE]
    assert waits[-1] == 0


def test_compile_gap_below_overhead_rejected():
    layout = _layout()
    first = CFG.overhead_samples
    prog = PulseProgram(
        events=(
            PulseEvent(PulseKind.MW_PULSE, first, 16, bank_id="pi"),
            PulseEvent(PulseKind.MW_PULSE, first + CFG.overhead_samples - 16, 16,
                       bank_id="pi"),
        ),
        clock=CFG,
    )
    with pytest.raises(GapTooSmall):
        compile_program(prog, layout)


def test_compile_missing_bank():
    layout = _layout()
    prog = PulseProgram(
        events=(PulseEvent(PulseKind.MW_PULSE, 64, 16, bank_id="nope"),),
        clock=CFG,
    )
    with pytest.raises(MissingBank):
        compile_program(prog, layout)


def test_compile_every_trigger_preceded_by_select():
    layout = _layout()
    compiled = compile_program(build_cpmg(_spec(), CFG), layout)
    last_select = None
    for ins in compiled.instructions:
        if ins.op is Opcode.SELECT_WAVEFORM:
            assert 0 <= ins.arg < CFG.ratio
            last_select = ins.arg
        if ins.op is Opcode.TRIGGER_PULSE:
            assert last_select is not None


def test_compile_phase_pattern_recoverable_from_stream():
    layout = _layout()
    spec = _spec(n=16)
    compiled = compile_program(build_cpmg(spec, CFG), layout)
    phase_words = []
    current = None
    for ins in compiled.instructions:
        if ins.op is Opcode.SET_PHASE:
            current = ins.arg
        elif ins.op is Opcode.TRIGGER_PULSE:
            phase_words.append(current)
    # skip the bracketing pi/2 pulses; compare pi-pulse phases to xy8
    expected = [phase_to_word(p) for p in spec.phases()]
    assert phase_words[1:-1] == expected
    assert phase_words[0] == phase_to_word(0.0)


def test_predicted_edges_shift_with_tau():
    layout = _layout()
    tau = 2444
    e1 = compile_program(build_cpmg(_spec(n=8, tau=tau), CFG), layout).predicted_edges
    e2 = compile_program(build_cpmg(_spec(n=8, tau=tau + 1), CFG), layout).predicted_edges
    # opener fixed; k-th pi pulse moves by 2k-1, closer moves by 2N
    assert e2[0] - e1[0] == 0
    for k in range(1, 9):
        assert e2[k] - e1[k] == 2 * k - 1
    assert e2[9] - e1[9] == 2 * 8


def test_instruction_text_round_trip():
    layout = _layout()
    compiled = compile_program(build_cpmg(_spec(n=8), CFG), layout)
    text = compiled.to_text()
    parsed = CompiledProgram.parse_text(text)
    assert parsed == list(compiled.instructions)
    line = text.splitlines()[0].split()
    assert line[0] == "SET-FREQ" and line[0] == line[0].upper()


def test_instruction_str_format():
    assert str(Instruction(Opcode.WAIT_COARSE, 7)) == "WAIT-COARSE 7"
