import numpy as np
import pytest

from finepulse.clockdomain import ClockConfig
from finepulse.dacsim import measure_edges, render
from finepulse.errors import NoEdges, StreamOverflow
from finepulse.sequencer import (
    CpmgSpec,
    Pattern,
    PulseEvent,
    PulseKind,
    PulseProgram,
    build_cpmg,
    compile_program,
)
from finepulse.waveform import (
    PHASE_MOD,
    allocate_channel,
    build_bank,
    freq_to_word,
    make_envelope,
    nco_phase_advance,
    phase_to_word,
)

CFG = ClockConfig()
PI_LEN, PI2_LEN = 268, 134


def _layout(extra=None):
    banks = {
        "pi": build_bank(make_envelope(PI_LEN, 1.0, 0.0), CFG),
        "pi2": build_bank(make_envelope(PI2_LEN, 1.0, 0.0), CFG),
    }
    if extra:
        banks.update(extra)
    return allocate_channel(banks)


def _single_pulse_program(start, length=PI_LEN, bank="pi", phase=0.0):
    return PulseProgram(
        events=(PulseEvent(PulseKind.MW_PULSE, start, length, phase=phase, bank_id=bank),),
        clock=CFG,
    )


def test_fine_delay_via_replica_selection():
    layout = _layout()
    compiled = compile_program(_single_pulse_program(52), layout)
    stream = render(compiled)
    mag = stream.envelope_magnitude()
    assert (mag[:52] == 0).all()
    assert mag[52] > 0.9 * 32767


def test_zero_amplitude_renders_silence():
    layout = _layout({"mute": build_bank(make_envelope(64, 0.0, 0.0), CFG)})
    compiled = compile_program(_single_pulse_program(64, 64, "mute"), layout)
    stream = render(compiled)
    assert (stream.samples == 0).all()
    with pytest.raises(NoEdges):
        measure_edges(stream, cfg=CFG)


def test_measured_edges_match_predictions_cpmg():
    layout = _layout()
    spec = CpmgSpec(n_pulses=32, tau_samples=2444, pi_bank="pi", pi2_bank="pi2",
                    pi_len=PI_LEN, pi2_len=PI2_LEN)
    compiled = compile_program(build_cpmg(spec, CFG), layout,
                               freq_word=freq_to_word(150e6, CFG))
    report = measure_edges(render(compiled), cfg=CFG)
    assert report.measured_starts == compiled.predicted_edges
    assert len(report.measured_starts) == 34


def test_two_pulse_gap_measurement():
    layout = _layout()
    g = 1000
    prog = PulseProgram(
        events=(
            PulseEvent(PulseKind.MW_PULSE, 64, PI_LEN, bank_id="pi"),
            PulseEvent(PulseKind.MW_PULSE, 64 + PI_LEN + g, PI_LEN, bank_id="pi"),
        ),
        clock=CFG,
    )
    compiled = compile_program(prog, layout, freq_word=freq_to_word(90e6, CFG))
    report = measure_edges(render(compiled), cfg=CFG)
    assert report.measured_starts[1] - report.measured_starts[0] == g + PI_LEN


def test_exhaustive_fine_residue_sweep():
    layout = _layout()
    base = 40 * CFG.ratio
    starts, residues = [], []
    for fine in range(16):
        compiled = compile_program(_single_pulse_program(base + fine), layout)
        report = measure_edges(render(compiled), cfg=CFG)
        starts.append(report.measured_starts[0])
        residues.append(report.residues[0])
    assert starts == [base + f for f in range(16)]
    assert residues == list(range(16))


def test_random_subcycle_placement_exact():
    layout = _layout()
    rng = np.random.default_rng(1234)
    for start in rng.integers(CFG.overhead_samples, 200_000, size=1000):
        compiled = compile_program(_single_pulse_program(int(start)), layout)
        report = measure_edges(render(compiled), cfg=CFG)
        assert report.measured_starts == (int(start),)


def test_carrier_phase_coherent_across_pulses():
    layout = _layout()
    freq_word = freq_to_word(150e6, CFG)
    delta_n = 37 * CFG.ratio + 5
    prog = PulseProgram(
        events=(
            PulseEvent(PulseKind.MW_PULSE, 64, PI_LEN, bank_id="pi"),
            PulseEvent(PulseKind.MW_PULSE, 64 + delta_n, PI_LEN, bank_id="pi"),
        ),
        clock=CFG,
    )
    compiled = compile_program(prog, layout, freq_word=freq_word)
    stream = render(compiled)
    analytic = stream.samples + 1j * stream.quadrature
    s0, s1 = 64, 64 + delta_n
    # demodulate each pulse at the known carrier referenced to its own start
    n = np.arange(PI_LEN)
    lo0 = np.exp(-2j * np.pi * ((freq_word * (s0 + n)) % PHASE_MOD) / PHASE_MOD)
    lo1 = np.exp(-2j * np.pi * ((freq_word * (s1 + n)) % PHASE_MOD) / PHASE_MOD)
    ph0 = np.angle(np.sum(analytic[s0 : s0 + PI_LEN] * lo0 * np.exp(
        2j * np.pi * (freq_word * np.arange(0)) )))
    ph0 = np.angle(np.sum(analytic[s0 : s0 + PI_LEN] * lo0))
    ph1 = np.angle(np.sum(analytic[s1 : s1 + PI_LEN] * lo1))
    # identical NCO settings: after removing the accumulator the residual
    # phases agree, i.e. the raw carrier phases differ by freq*dt exactly
    assert abs((ph1 - ph0 + np.pi) % (2 * np.pi) - np.pi) < 1e-6
    expected_word = nco_phase_advance(freq_word, delta_n)
    raw0 = np.angle(analytic[s0])
    raw1 = np.angle(analytic[s1])
    dphi = (raw1 - raw0) % (2 * np.pi)
    assert abs(dphi - expected_word * 2 * np.pi / PHASE_MOD) < 1e-6


def test_iq_encoded_phase_equals_nco_register_phase():
    phi = 2 * np.pi / 3
    freq_word = freq_to_word(137e6, CFG)
    layout_iq = _layout({"iq": build_bank(make_envelope(200, 1.0, phi), CFG)})
    prog_iq = _single_pulse_program(64, 200, "iq", phase=0.0)
    stream_iq = render(compile_program(prog_iq, layout_iq, freq_word=freq_word))

    layout_x = _layout({"x": build_bank(make_envelope(200, 1.0, 0.0), CFG)})
    prog_nco = _single_pulse_program(64, 200, "x", phase=phi)
    stream_nco = render(compile_program(prog_nco, layout_x, freq_word=freq_word))

    n = 64 + 200 + 32
    diff = np.abs(stream_iq.samples[:n] - stream_nco.samples[:n])
    assert diff.max() <= 1.0  # within one LSB of the 16-bit output


def test_rendering_additive_over_pulses():
    layout = _layout()
    freq_word = freq_to_word(150e6, CFG)
    a = _single_pulse_program(64)
    b = _single_pulse_program(64 + 2000)
    both = PulseProgram(events=a.events + b.events, clock=CFG)
    sa = render(compile_program(a, layout, freq_word=freq_word))
    sb = render(compile_program(b, layout, freq_word=freq_word))
    sab = render(compile_program(both, layout, freq_word=freq_word))
    n = min(len(sa), len(sb), len(sab))
    assert np.array_equal(
        sab.samples[:n], (sa.samples[:n] + sb.samples[:n])
    )


def test_marker_edges_recorded():
    layout = _layout()
    spec = CpmgSpec(n_pulses=8, tau_samples=2444, pi_bank="pi", pi2_bank="pi2",
                    pi_len=PI_LEN, pi2_len=PI2_LEN)
    prog = build_cpmg(spec, CFG)
    compiled = compile_program(prog, layout)
    stream = render(compiled)
    lasers = [e for e in prog.events if e.kind is PulseKind.LASER_GATE]
    expected = sorted(sum(([e.start_samples, e.end_samples] for e in lasers), []))
    assert stream.marker_edges[0] == expected


def test_stream_overflow_guard():
    layout = _layout()
    compiled = compile_program(_single_pulse_program(10_000), layout)
    with pytest.raises(StreamOverflow):
        render(compiled, max_samples=100)


def test_stream_export(tmp_path):
    layout = _layout()
    compiled = compile_program(_single_pulse_program(52), layout,
                               freq_word=freq_to_word(150e6, CFG))
    stream = render(compiled)
    bin_path = tmp_path / "stream.bin"
    csv_path = tmp_path / "stream.csv"
    stream.write_bin(bin_path)
    stream.write_csv(csv_path)
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<i2")
    assert len(raw) == len(stream)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "index,value"
    assert len(lines) == len(stream) + 1
    report = measure_edges(stream, cfg=CFG)
    edge_csv = tmp_path / "edges.csv"
    report.write_csv(edge_csv)
    assert edge_csv.read_text().splitlines()[0] == "start_sample,residue"


def test_phase_register_rotates_output():
    layout = _layout()
    stream_x = render(compile_program(_single_pulse_program(64, phase=0.0), layout))
    stream_y = render(compile_program(_single_pulse_program(64, phase=np.pi / 2), layout))
    # with zero carrier the X pulse lands on I (samples), Y on the quadrature
    assert stream_x.samples[64] == pytest.approx(32767)
    assert stream_y.samples[64] == pytest.approx(0, abs=1e-9)
    assert stream_y.quadrature[64] == pytest.approx(32767)
