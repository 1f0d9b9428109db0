"""Experiment configuration: one YAML file drives every CLI command.

Sections mirror the package layering: ``clock`` and ``pulses`` feed the
compiler, ``sequence`` picks the experiment and sweep, ``system``/``noise``
drive the physics simulation, ``fit`` tunes the extraction pipeline.  A fully
annotated example ships in ``configs/reference.yaml``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .clockdomain import ClockConfig, seconds_to_samples
from .errors import ConfigError
from .sequencer import CpmgSpec, Pattern, ScaffoldSpec, build_cpmg, build_hahn, build_rabi, build_t1
from .specfit import FitOptions
from .spinmodel import DecoherenceModel, FieldConfig, HyperfinePair, SpinSystem
from .waveform import Shape, allocate_channel, build_bank, freq_to_word, make_envelope


@dataclass(frozen=True)
class PulseSettings:
    rabi_freq_mhz: float = 9.18
    amplitude: float = 1.0
    shape: str = "constant"
    carrier_freq_mhz: float = 150.0
    pi_samples: int | None = None   # override the Rabi-derived length
    pi2_samples: int | None = None

    def pi_length(self, clock: ClockConfig) -> int:
        if self.pi_samples is not None:
            return self.pi_samples
        t_pi = 1.0 / (2.0 * self.rabi_freq_mhz * 1e6)
        return seconds_to_samples(t_pi, clock).samples

    def pi2_length(self, clock: ClockConfig) -> int:
        if self.pi2_samples is not None:
            return self.pi2_samples
        t = 1.0 / (4.0 * self.rabi_freq_mhz * 1e6)
        return seconds_to_samples(t, clock).samples


@dataclass(frozen=True)
class SequenceSettings:
    type: str = "cpmg"                # rabi | t1 | hahn | cpmg
    n_pulses: int = 32
    pattern: str = "xy8"
    sweep_start_ns: float = 400.0
    sweep_stop_ns: float = 600.0
    sweep_step_samples: int = 1

    def sweep_samples(self, clock: ClockConfig) -> list[int]:
        if self.sweep_step_samples < 1:
            raise ConfigError("sweep step must be at least one DAC sample")
        lo = seconds_to_samples(self.sweep_start_ns * 1e-9, clock).samples
        hi = seconds_to_samples(self.sweep_stop_ns * 1e-9, clock).samples
        if hi < lo:
            raise ConfigError("sweep stop must not precede sweep start")
        return list(range(lo, hi + 1, self.sweep_step_samples))


@dataclass(frozen=True)
class SystemSettings:
    b_field_gauss: float = 365.0
    spins_khz: tuple[tuple[float, float], ...] = ()
    t1_ms: float | None = None
    t2_ms: float | None = None
    stretch_p: float = 1.0

    def spin_system(self) -> SpinSystem:
        deco = None
        if self.t1_ms is not None and self.t2_ms is not None:
            deco = DecoherenceModel(
                t1_s=self.t1_ms * 1e-3, t2_s=self.t2_ms * 1e-3, stretch_p=self.stretch_p
            )
        return SpinSystem(
            field=FieldConfig(b_field_g=self.b_field_gauss),
            spins=tuple(HyperfinePair.from_khz(a, b) for a, b in self.spins_khz),
            decoherence=deco,
        )


@dataclass(frozen=True)
class NoiseSettings:
    shots: int = 50000
    c0: float = 1.0
    c1: float = 0.62
    seed: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    clock: ClockConfig = ClockConfig()
    pulses: PulseSettings = PulseSettings()
    sequence: SequenceSettings = SequenceSettings()
    system: SystemSettings = SystemSettings()
    noise: NoiseSettings = NoiseSettings()
    fit: FitOptions = FitOptions()

    def carrier_word(self) -> int:
        return freq_to_word(self.pulses.carrier_freq_mhz * 1e6, self.clock)


_SECTION_TYPES = {
    "clock": ClockConfig,
    "pulses": PulseSettings,
    "sequence": SequenceSettings,
    "system": SystemSettings,
    "noise": NoiseSettings,
    "fit": FitOptions,
}

_TUPLE_KEYS = {
    ("system", "spins_khz"),
    ("fit", "a_search_khz"),
    ("fit", "b_grid_khz"),
}


def _coerce(section: str, key: str, value):
    if (section, key) in _TUPLE_KEYS and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{path}:{line}: {exc.problem}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    kwargs = {}
    for section, payload in raw.items():
        if section not in _SECTION_TYPES:
            raise ConfigError(f"{path}: unknown section {section!r}")
        if payload is None:
            payload = {}
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: section {section!r} must be a mapping")
        cls = _SECTION_TYPES[section]
        valid = set(cls.__dataclass_fields__)
        fields = {}
        for key, value in payload.items():
            if key not in valid:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            fields[key] = _coerce(section, key, value)
        try:
            kwargs[section] = cls(**fields)
        except Exception as exc:
            raise ConfigError(f"{path}: bad section {section!r}: {exc}") from exc
    return ExperimentConfig(**kwargs)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    data = {}
    for section, value in asdict(cfg).items():
        sec = {}
        for key, v in value.items():
            if isinstance(v, tuple):
                v = [list(x) if isinstance(x, tuple) else x for x in v]
            sec[key] = v
        data[section] = sec
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True))


def build_layout(cfg: ExperimentConfig):
    """Waveform banks and channel layout for the configured sequence."""
    clock = cfg.clock
    shape = Shape(cfg.pulses.shape)
    amp = cfg.pulses.amplitude
    if cfg.sequence.type == "rabi":
        banks = {}
        for d in cfg.sequence.sweep_samples(clock):
            banks[f"rabi_{d}"] = build_bank(make_envelope(d, amp, 0.0, shape), clock)
        return allocate_channel(banks)
    pi_len = cfg.pulses.pi_length(clock)
    pi2_len = cfg.pulses.pi2_length(clock)
    banks = {
        "pi": build_bank(make_envelope(pi_len, amp, 0.0, shape), clock),
        "pi2": build_bank(make_envelope(pi2_len, amp, 0.0, shape), clock),
    }
    return allocate_channel(banks)


def build_programs(cfg: ExperimentConfig, scaffold: ScaffoldSpec | None = ScaffoldSpec()):
    """The sweep's pulse programs for the configured sequence type."""
    clock = cfg.clock
    seq = cfg.sequence
    sweep = seq.sweep_samples(clock)
    kind = seq.type
    if kind == "rabi":
        return build_rabi(sweep, clock, scaffold)
    if kind == "t1":
        return build_t1(sweep, clock, scaffold if scaffold is not None else ScaffoldSpec())
    pi_len = cfg.pulses.pi_length(clock)
    pi2_len = cfg.pulses.pi2_length(clock)
    if kind == "hahn":
        return build_hahn(sweep, clock, "pi", "pi2", pi_len, pi2_len, scaffold)
    if kind == "cpmg":
        programs = []
        for tau in sweep:
            spec = CpmgSpec(
                n_pulses=seq.n_pulses, tau_samples=tau, pi_bank="pi", pi2_bank="pi2",
                pi_len=pi_len, pi2_len=pi2_len, pattern=Pattern(seq.pattern),
            )
            programs.append(build_cpmg(spec, clock, scaffold))
        return programs
    raise ConfigError(f"unknown sequence type {kind!r}")
