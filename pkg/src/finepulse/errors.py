"""Domain exceptions shared across the package.

Everything raised on purpose derives from FinepulseError so the CLI can map
domain failures to exit code 1 while real bugs still surface as tracebacks.
"""


class FinepulseError(Exception):
    """Base class for all expected failure modes."""


class TimingError(FinepulseError):
    """Invalid clock configuration or timing arithmetic input."""


class BudgetExceeded(FinepulseError):
    """Waveform memory request does not fit the per-channel sample budget."""

    def __init__(self, requested: int, capacity: int):
        self.requested = requested
        self.capacity = capacity
        self.overflow = requested - capacity
        super().__init__(
            f"waveform memory budget exceeded: requested {requested} samples, "
            f"capacity {capacity} (overflow {self.overflow})"
        )


class UnschedulableTau(FinepulseError):
    """Inter-pulse delay too short for the pulse lengths and overhead."""


class BadN(FinepulseError):
    """Pulse count incompatible with the requested phase pattern."""


class GapTooSmall(FinepulseError):
    """Requested pulse spacing below the per-pulse instruction overhead."""


class MissingBank(FinepulseError):
    """Pulse references a waveform bank absent from the channel layout."""


class UnknownBank(FinepulseError):
    """Instruction stream references a bank index outside the layout."""


class StreamOverflow(FinepulseError):
    """Rendered stream would exceed the configured maximum duration."""


class NoEdges(FinepulseError):
    """Edge measurement found no above-threshold pulses in the stream."""


class EmptyTrace(FinepulseError):
    """Trace has too few points for the requested analysis."""


class DegenerateGroup(FinepulseError):
    """Harmonic group too small for a linear fit."""


class WindowTooNarrow(FinepulseError):
    """Fit window does not bracket the resonance."""


class InvalidContrast(FinepulseError):
    """Readout contrast levels do not allow estimating the spin population."""


class ConfigError(FinepulseError):
    """Experiment configuration file is malformed or inconsistent."""
