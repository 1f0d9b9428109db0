"""Split-clock timing arithmetic.

Waveform samples live on the DAC grid while instruction scheduling lives on
the (much coarser) sequencer grid; the two rates are locked in an exact
power-of-two ratio.  Everything downstream keeps time as integer DAC samples,
so the decomposition into (sequencer cycles, residual samples) is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from .errors import TimingError

# Stock firmware rates: 16 x 307.2 MHz = 4.9152 GHz exactly.
DEFAULT_DAC_RATE_HZ = 4_915_200_000
DEFAULT_SEQ_RATE_HZ = 307_200_000


@dataclass(frozen=True)
class ClockConfig:
    """The two clock domains driving pulse playback.

    ``dac_rate_hz`` must be an exact power-of-two multiple of ``seq_rate_hz``;
    the shift/mask delay decomposition relies on it.  ``pulse_overhead_cycles``
    is the register-staging cost charged to every triggered pulse, in
    sequencer cycles.
    """

    dac_rate_hz: int = DEFAULT_DAC_RATE_HZ
    seq_rate_hz: int = DEFAULT_SEQ_RATE_HZ
    pulse_overhead_cycles: int = 2

    def __post_init__(self):
        if self.dac_rate_hz <= 0 or self.seq_rate_hz <= 0:
            raise TimingError("clock rates must be positive integers")
        if self.dac_rate_hz % self.seq_rate_hz != 0:
            raise TimingError(
                f"dac rate {self.dac_rate_hz} is not an integer multiple of "
                f"sequencer rate {self.seq_rate_hz}"
            )
        ratio = self.dac_rate_hz // self.seq_rate_hz
        if ratio & (ratio - 1):
            raise TimingError(f"clock ratio {ratio} is not a power of two")
        if self.pulse_overhead_cycles < 0:
            raise TimingError("pulse overhead must be non-negative")

    @property
    def ratio(self) -> int:
        return self.dac_rate_hz // self.seq_rate_hz

    @property
    def fine_shift(self) -> int:
        return self.ratio.bit_length() - 1

    @property
    def fine_mask(self) -> int:
        return self.ratio - 1

    @property
    def sample_period_s(self) -> float:
        return 1.0 / self.dac_rate_hz

    @property
    def cycle_period_s(self) -> float:
        return 1.0 / self.seq_rate_hz

    @property
    def overhead_samples(self) -> int:
        return self.pulse_overhead_cycles * self.ratio


@dataclass(frozen=True)
class DelaySpec:
    """A delay split into whole sequencer cycles plus a sample residue.

    ``total_samples`` is filled in by :func:`decompose`; hand-built specs may
    leave it None and :func:`recompose` derives it.
    """

    coarse: int
    fine: int
    total_samples: int | None = None

    def __post_init__(self):
        if self.coarse < 0 or self.fine < 0:
            raise TimingError("delay components must be non-negative")
        if self.total_samples is not None and self.total_samples < 0:
            raise TimingError("total_samples must be non-negative")


def decompose(delay_samples: int, cfg: ClockConfig) -> DelaySpec:
    """Split a sample-count delay into (coarse cycles, fine samples).

    Uses shift/mask; the clock invariant guarantees this equals floor
    division and modulo.
    """
    if delay_samples < 0:
        raise TimingError(f"delay must be non-negative, got {delay_samples}")
    coarse = delay_samples >> cfg.fine_shift
    fine = delay_samples & cfg.fine_mask
    return DelaySpec(coarse=coarse, fine=fine, total_samples=delay_samples)


def recompose(spec: DelaySpec, cfg: ClockConfig) -> int:
    """Inverse of decompose: total delay in DAC samples."""
    if spec.fine >= cfg.ratio:
        raise TimingError(f"fine component {spec.fine} must be < ratio {cfg.ratio}")
    total = spec.coarse * cfg.ratio + spec.fine
    if spec.total_samples is not None and spec.total_samples != total:
        raise TimingError(
            f"inconsistent DelaySpec: total {spec.total_samples} != "
            f"{spec.coarse} * {cfg.ratio} + {spec.fine}"
        )
    return total


class SampleCount(NamedTuple):
    samples: int
    error_s: float  # t_requested - samples/dac_rate


def seconds_to_samples(t: float, cfg: ClockConfig, rounding: str = "nearest") -> SampleCount:
    """Quantize a user-facing time in seconds onto the DAC sample grid.

    Returns the sample count together with the signed quantization error so
    callers can report how far the realized time sits from the request.
    """
    if t < 0:
        raise TimingError(f"time must be non-negative, got {t}")
    exact = t * cfg.dac_rate_hz
    if rounding == "nearest":
        n = int(math.floor(exact + 0.5))
    elif rounding == "floor":
        n = int(math.floor(exact))
    elif rounding == "ceil":
        n = int(math.ceil(exact))
    else:
        raise TimingError(f"unknown rounding mode {rounding!r}")
    return SampleCount(samples=n, error_s=t - n * cfg.sample_period_s)


def samples_to_seconds(n: int, cfg: ClockConfig) -> float:
    return n * cfg.sample_period_s
