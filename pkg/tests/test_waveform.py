import numpy as np
import pytest

from finepulse.clockdomain import ClockConfig
from finepulse.errors import BudgetExceeded, FinepulseError
from finepulse.waveform import (
    CHANNEL_CAPACITY,
    FULL_SCALE,
    Shape,
    allocate_channel,
    build_bank,
    export_channel,
    freq_to_word,
    make_envelope,
    nco_phase_advance,
    phase_to_word,
)

CFG = ClockConfig()


def test_full_scale_x_pulse():
    env = make_envelope(4, 1.0, 0.0)
    assert list(env.i_samples) == [32767] * 4
    assert list(env.q_samples) == [0] * 4


def test_full_scale_y_pulse():
    env = make_envelope(4, 1.0, np.pi / 2)
    assert list(env.i_samples) == [0] * 4
    assert list(env.q_samples) == [32767] * 4


def test_pi_pulse_length_from_rabi_frequency():
    # 9.18 MHz drive: pi takes 1/(2 f) = 54.47 ns = 268 samples at 4.9152 GS/s
    t_pi = 1.0 / (2 * 9.18e6)
    n = round(t_pi * CFG.dac_rate_hz)
    assert n == 268
    env = make_envelope(n, 1.0, 0.0)
    assert env.length_samples == 268
    assert env.i_samples.max() == 32767


def test_envelope_validation():
    with pytest.raises(FinepulseError):
        make_envelope(0, 1.0, 0.0)
    with pytest.raises(FinepulseError):
        make_envelope(4, 1.5, 0.0)


def test_gaussian_edges_rise_and_fall():
    env = make_envelope(64, 1.0, 0.0, Shape.GAUSSIAN_EDGED, edge_samples=16)
    i = env.i_samples.astype(int)
    assert i[0] < i[8] < i[16]
    assert (i[16:48] == 32767).all()
    assert list(i[:16]) == list(i[-16:][::-1])


def test_quantization_symmetric():
    env_pos = make_envelope(1, 0.5, 0.0)
    env_neg = make_envelope(1, 0.5, np.pi)
    assert env_pos.i_samples[0] == -env_neg.i_samples[0]


def test_bank_padding_268():
    bank = build_bank(make_envelope(268, 1.0, 0.0), CFG)
    assert bank.padded_length == 288
    assert bank.total_samples == 4608
    assert len(bank.replicas) == 16


def test_bank_padding_single_sample():
    bank = build_bank(make_envelope(1, 1.0, 0.0), CFG)
    assert bank.padded_length == 16
    assert bank.total_samples == 256


def test_replica_leading_zeros():
    bank = build_bank(make_envelope(10, 1.0, 0.0), CFG)
    for r, rep in enumerate(bank.replicas):
        assert (rep.i_samples[:r] == 0).all()
        assert rep.i_samples[r] == bank.base.i_samples[0]
        assert (rep.i_samples[r : r + 10] == bank.base.i_samples).all()
        assert (rep.i_samples[r + 10 :] == 0).all()


def test_shift_consistency_between_replicas():
    bank = build_bank(make_envelope(37, 0.8, 1.1), CFG)
    base = bank.replicas[0]
    for r in range(16):
        rep = bank.replicas[r]
        # replica r equals replica 0 delayed by r samples over the padded span
        assert (rep.i_samples[r:] == base.i_samples[: bank.padded_length - r]).all()
        assert (rep.q_samples[r:] == base.q_samples[: bank.padded_length - r]).all()


def test_allocate_two_pi_banks():
    banks = {
        "pi": build_bank(make_envelope(268, 1.0, 0.0), CFG),
        "pi2": build_bank(make_envelope(134, 1.0, 0.0), CFG),
    }
    layout = allocate_channel(banks)
    assert layout.offsets == {"pi": 0, "pi2": 4608}
    assert layout.total_samples == 4608 + 16 * 160


def test_allocate_rejects_overflow_with_amount():
    bank = build_bank(make_envelope(268, 1.0, 0.0), CFG)
    with pytest.raises(BudgetExceeded) as info:
        allocate_channel({f"b{i}": bank for i in range(15)})
    assert info.value.requested == 15 * 4608
    assert info.value.overflow == 15 * 4608 - CHANNEL_CAPACITY


def test_allocate_randomized_boundary():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n_banks = int(rng.integers(1, 12))
        lens = rng.integers(1, 1200, size=n_banks)
        banks = {
            f"b{i}": build_bank(make_envelope(int(n), 1.0, 0.0), CFG)
            for i, n in enumerate(lens)
        }
        total = sum(b.total_samples for b in banks.values())
        if total > CHANNEL_CAPACITY:
            with pytest.raises(BudgetExceeded):
                allocate_channel(banks)
        else:
            layout = allocate_channel(banks)
            assert layout.total_samples == total <= CHANNEL_CAPACITY
            offsets = sorted(layout.offsets.values())
            sizes = [layout.banks[k].total_samples
                     for k in sorted(layout.offsets, key=layout.offsets.get)]
            for (o1, s), o2 in zip(zip(offsets, sizes), offsets[1:]):
                assert o1 + s == o2


@pytest.mark.parametrize(
    "freq_word,n,expect",
    [(2**31, 2, 0), (1, 2**32, 0), (0x10000000, 3, 0x30000000)],
)
def test_nco_phase_advance(freq_word, n, expect):
    assert nco_phase_advance(freq_word, n) == expect


def test_phase_word_resolution():
    assert phase_to_word(0.0) == 0
    assert phase_to_word(np.pi) == 2**31
    assert phase_to_word(2 * np.pi) == 0
    assert phase_to_word(np.pi / 2) == 2**30


def test_freq_word_round_trip():
    w = freq_to_word(150e6, CFG)
    assert abs(w / 2**32 * CFG.dac_rate_hz - 150e6) < CFG.dac_rate_hz / 2**32


def test_export_channel(tmp_path):
    banks = {
        "pi": build_bank(make_envelope(20, 1.0, 0.0), CFG),
        "pi2": build_bank(make_envelope(10, 1.0, np.pi / 2), CFG),
    }
    layout = allocate_channel(banks)
    bin_path = tmp_path / "bank.bin"
    meta_path = tmp_path / "bank.json"
    export_channel(layout, bin_path, meta_path)
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<i2")
    pi = layout.banks["pi"]
    assert len(raw) == 2 * sum(b.total_samples for b in banks.values())
    # replica 0 of the first bank leads the file, I then Q interleaved
    assert raw[0] == pi.replicas[0].i_samples[0] == FULL_SCALE
    assert raw[1] == pi.replicas[0].q_samples[0] == 0
    import json

    meta = json.loads(meta_path.read_text())
    assert meta["ratio"] == 16
    assert meta["banks"][0]["id"] == "pi"
    assert meta["banks"][1]["offset"] == pi.total_samples
