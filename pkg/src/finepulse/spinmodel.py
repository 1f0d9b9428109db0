"""Coherence of an NV electron coupled to carbon-13 nuclei under CPMG.

Two independent routes to the same number:

* :func:`px_analytic` evaluates the closed form for the survival probability
  of the electron coherence.  Each tau-pi-tau pair acts on the nucleus as one
  of two conditional rotations; the signal depends only on the per-pair
  rotation angle and the angle between the two rotation axes.
* :func:`px_oracle` multiplies out the full joint propagator numerically,
  with matrix exponentials for the free segments and ideal instantaneous
  pi pulses.  It knows nothing about the closed form and is the ground truth
  the analytic route is validated against.

Internally every coupling is an angular frequency (rad/s); kHz appear only at
the interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import EmptyTrace, FinepulseError, InvalidContrast

TWO_PI = 2.0 * np.pi

# 13C gyromagnetic ratio over 2*pi, Hz per gauss (CODATA-derived).
GAMMA_C13_HZ_PER_G = 1070.5

# Default physical bound on hyperfine couplings, rad/s.
COUPLING_BOUND = TWO_PI * 1.0e6

_SX = np.array([[0.0, 0.5], [0.5, 0.0]], dtype=complex)
_SZ = np.array([[0.5, 0.0], [0.0, -0.5]], dtype=complex)
_PAULI_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
_PAULI_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)


@dataclass(frozen=True)
class FieldConfig:
    """Static field and the nuclear species it acts on."""

    b_field_g: float
    gamma_hz_per_g: float = GAMMA_C13_HZ_PER_G

    def __post_init__(self):
        if self.larmor_rad_s <= 0.0:
            raise FinepulseError("Larmor frequency must be positive")

    @property
    def larmor_rad_s(self) -> float:
        return TWO_PI * self.gamma_hz_per_g * self.b_field_g


@dataclass(frozen=True)
class HyperfinePair:
    """Parallel and perpendicular hyperfine components, rad/s."""

    a_par: float
    b_perp: float

    def __post_init__(self):
        if self.b_perp < 0.0:
            raise FinepulseError("perpendicular coupling must be non-negative")
        if abs(self.a_par) >= COUPLING_BOUND * (1 + 1e-12) or \
                self.b_perp >= COUPLING_BOUND * (1 + 1e-12):
            raise FinepulseError(
                "hyperfine couplings must stay below 2*pi*1 MHz "
                f"(got A={self.a_par:.3e}, B={self.b_perp:.3e} rad/s)"
            )

    @classmethod
    def from_khz(cls, a_khz: float, b_khz: float) -> "HyperfinePair":
        return cls(a_par=TWO_PI * a_khz * 1e3, b_perp=TWO_PI * b_khz * 1e3)

    @property
    def a_khz(self) -> float:
        return self.a_par / TWO_PI / 1e3

    @property
    def b_khz(self) -> float:
        return self.b_perp / TWO_PI / 1e3


@dataclass(frozen=True)
class DecoherenceModel:
    """Phenomenological electron decoherence envelope.

    The coherent modulation is scaled by exp(-(t/T2)^p - t/T1) with t the
    total free-evolution time 2*N*tau.
    """

    t1_s: float
    t2_s: float
    stretch_p: float = 1.0

    def __post_init__(self):
        if self.t1_s <= 0.0 or self.t2_s <= 0.0:
            raise FinepulseError("relaxation times must be positive")
        if not 0.5 <= self.stretch_p <= 3.0:
            raise FinepulseError("stretch exponent must lie in [0.5, 3]")

    def envelope(self, total_time_s):
        t = np.asarray(total_time_s, dtype=float)
        return np.exp(-((t / self.t2_s) ** self.stretch_p) - t / self.t1_s)


@dataclass(frozen=True)
class SpinSystem:
    field: FieldConfig
    spins: tuple[HyperfinePair, ...] = ()
    decoherence: DecoherenceModel | None = None

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))


def _unit_geometry(a: float, b: float, omega_l: float, tau):
    """Per tau-pi-tau pair: rotation angle phi and the two conditional axes.

    Returns (cos_phi, sin_phi, n0n1) arrays broadcast over tau.  Degenerate
    points where either axis vanishes (no conditional evolution) are flagged
    with n0n1 = 1 and sin_phi = 0, which yields the correct limit M = 1.
    """
    tau = np.asarray(tau, dtype=float)
    alpha = omega_l * tau
    omega_1 = float(np.hypot(a + omega_l, b))
    if omega_1 == 0.0:
        one = np.ones_like(tau)
        return one, np.zeros_like(tau), one
    beta = omega_1 * tau
    mz = (a + omega_l) / omega_1
    mx = b / omega_1
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cos_phi = ca * cb - mz * sa * sb
    # Rotation-axis vectors of the two conditional pair propagators
    # (y components vanish identically).
    v0x = mx * sb
    v0z = mz * sb * ca + sa * cb
    v1x = mx * (sb * ca - mz * sa * (1.0 - cb))
    v1z = mx * mx * sa + mz * (mz * sa * cb + sb * ca)
    n0 = np.hypot(v0x, v0z)
    n1 = np.hypot(v1x, v1z)
    norm = n0 * n1
    degenerate = norm < 1e-290
    safe = np.where(degenerate, 1.0, norm)
    n0n1 = np.clip((v0x * v1x + v0z * v1z) / safe, -1.0, 1.0)
    n0n1 = np.where(degenerate, 1.0, n0n1)
    sin_phi = np.where(degenerate, 0.0, n0)
    return cos_phi, sin_phi, n0n1


def _px_even(a: float, b: float, omega_l: float, tau, n_pulses: int):
    """Closed-form survival probability for an even number of pi pulses."""
    cos_phi, sin_phi, n0n1 = _unit_geometry(a, b, omega_l, tau)
    phi = np.arctan2(sin_phi, cos_phi)
    m = 1.0 - (1.0 - n0n1) * np.sin(n_pulses * phi / 2.0) ** 2
    return (1.0 + m) / 2.0


def px_analytic(spin: HyperfinePair, field: FieldConfig, tau, n_pulses: int):
    """Probability of preserving the prepared electron coherence.

    ``tau`` (seconds, scalar or array) is the half-delay of each tau-pi-tau
    unit; ``n_pulses`` must be even since the closed form describes whole
    pulse pairs.  Validated against :func:`px_oracle`.
    """
    if n_pulses < 0:
        raise FinepulseError("n_pulses must be non-negative")
    if n_pulses % 2:
        raise FinepulseError(
            "the closed form holds for even pulse numbers; use px_oracle for odd N"
        )
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr <= 0.0):
        raise FinepulseError("tau must be positive")
    out = _px_even(spin.a_par, spin.b_perp, field.larmor_rad_s, tau_arr, n_pulses)
    return float(out) if np.isscalar(tau) or np.ndim(tau) == 0 else out


def _free_propagator(spins, omega_l: float, tau: float) -> np.ndarray:
    """Joint propagator of one free segment, block per electron state."""
    dim = 2 ** len(spins)
    h0 = np.zeros((dim, dim), dtype=complex)
    h1 = np.zeros((dim, dim), dtype=complex)
    for idx, sp in enumerate(spins):
        ops_z = [np.eye(2, dtype=complex)] * len(spins)
        ops_z[idx] = _SZ
        ops_x = [np.eye(2, dtype=complex)] * len(spins)
        ops_x[idx] = _SX
        iz = ops_z[0]
        ix = ops_x[0]
        for o_z, o_x in zip(ops_z[1:], ops_x[1:]):
            iz = np.kron(iz, o_z)
            ix = np.kron(ix, o_x)
        h0 += omega_l * iz
        h1 += (sp.a_par + omega_l) * iz + sp.b_perp * ix
    u0 = expm(-1j * h0 * tau)
    u1 = expm(-1j * h1 * tau)
    p00 = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)
    p11 = np.array([[0.0, 0.0], [0.0, 1.0]], dtype=complex)
    return np.kron(p00, u0) + np.kron(p11, u1)


def _pattern_phases(pattern: str, n_pulses: int) -> list[float]:
    if pattern == "xy8":
        base = (0.0, np.pi / 2, 0.0, np.pi / 2, np.pi / 2, 0.0, np.pi / 2, 0.0)
        return [base[k % 8] for k in range(n_pulses)]
    if pattern == "all-x":
        return [0.0] * n_pulses
    raise FinepulseError(f"unknown phase pattern {pattern!r}")


def px_oracle(
    spins: HyperfinePair | Sequence[HyperfinePair],
    field: FieldConfig,
    tau: float,
    n_pulses: int,
    pattern: str = "all-x",
) -> float:
    """Brute-force survival probability by direct unitary evolution.

    Electron prepared with a pi/2 pulse, nuclei maximally mixed, N ideal
    instantaneous pi pulses at the pattern phases, closing pi/2 undoing the
    preparation; returns the population left in the initial electron state.
    Accepts one nucleus or a list (joint dimension 2**k).
    """
    if n_pulses < 0:
        raise FinepulseError("n_pulses must be non-negative")
    if n_pulses > 0 and tau <= 0.0:
        raise FinepulseError("tau must be positive")
    spin_list = [spins] if isinstance(spins, HyperfinePair) else list(spins)
    nuc_dim = 2 ** len(spin_list)
    eye_n = np.eye(nuc_dim, dtype=complex)

    def electron_rotation(angle: float, phase: float) -> np.ndarray:
        axis = np.cos(phase) * _PAULI_X + np.sin(phase) * _PAULI_Y
        return np.kron(expm(-1j * angle * axis / 2.0), eye_n)

    u = electron_rotation(np.pi / 2.0, 0.0)
    if n_pulses > 0:
        free = _free_propagator(spin_list, field.larmor_rad_s, tau)
        for ph in _pattern_phases(pattern, n_pulses):
            u = free @ electron_rotation(np.pi, ph) @ free @ u
    u = electron_rotation(-np.pi / 2.0, 0.0) @ u

    prob = 0.0
    for m in range(nuc_dim):
        psi = u[:, m]  # initial state |0>_e (x) |m>_nuclear
        prob += np.sum(np.abs(psi[:nuc_dim]) ** 2) / nuc_dim
    return float(prob)


def resonance_tau(k: int, spin: HyperfinePair, field: FieldConfig) -> float:
    """Half-delay of the k-th coherence dip, (2k-1)*pi / (A + 2*omega_L)."""
    if k < 1:
        raise FinepulseError(f"harmonic index must be >= 1, got {k}")
    denom = spin.a_par + 2.0 * field.larmor_rad_s
    if denom <= 0.0:
        raise FinepulseError("A + 2*omega_L must be positive for a resonance")
    return (2 * k - 1) * np.pi / denom


def px_multi(system: SpinSystem, tau, n_pulses: int):
    """Survival probability for a bath of independent nuclei.

    Per-spin modulations multiply; the optional decoherence envelope scales
    the coherent deviation from 1/2.
    """
    tau_arr = np.asarray(tau, dtype=float)
    m_total = np.ones_like(tau_arr)
    for sp in system.spins:
        p = _px_even(sp.a_par, sp.b_perp, system.field.larmor_rad_s, tau_arr, _even(n_pulses))
        m_total = m_total * (2.0 * p - 1.0)
    px = (1.0 + m_total) / 2.0
    if system.decoherence is not None:
        env = system.decoherence.envelope(2.0 * n_pulses * tau_arr)
        px = 0.5 + (px - 0.5) * env
    return float(px) if np.ndim(tau) == 0 else px


def _even(n_pulses: int) -> int:
    if n_pulses % 2:
        raise FinepulseError(
            "the closed form holds for even pulse numbers; use px_oracle for odd N"
        )
    return n_pulses


@dataclass(frozen=True)
class CpmgTrace:
    """A sampled CPMG signal: estimated survival probability vs tau."""

    tau_s: np.ndarray
    px_est: np.ndarray
    px_err: np.ndarray
    counts_signal: np.ndarray
    counts_ref: np.ndarray

    def __post_init__(self):
        for name in ("tau_s", "px_est", "px_err", "counts_signal", "counts_ref"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        n = len(self.tau_s)
        if any(len(getattr(self, f)) != n
               for f in ("px_est", "px_err", "counts_signal", "counts_ref")):
            raise EmptyTrace("trace columns must have equal length")

    def __len__(self) -> int:
        return len(self.tau_s)

    def slice(self, tau_lo: float, tau_hi: float) -> "CpmgTrace":
        sel = (self.tau_s >= tau_lo) & (self.tau_s <= tau_hi)
        return CpmgTrace(
            tau_s=self.tau_s[sel], px_est=self.px_est[sel], px_err=self.px_err[sel],
            counts_signal=self.counts_signal[sel], counts_ref=self.counts_ref[sel],
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("tau_s,px_est,px_err,counts_signal,counts_ref\n")
            for row in zip(self.tau_s, self.px_est, self.px_err,
                           self.counts_signal, self.counts_ref):
                fh.write("%.12e,%.9f,%.9f,%d,%d\n" % row)

    @classmethod
    def read_csv(cls, path: str | Path) -> "CpmgTrace":
        header_seen = False
        cols: list[list[float]] = [[], [], [], [], []]
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                if not header_seen:
                    if line != "tau_s,px_est,px_err,counts_signal,counts_ref":
                        raise EmptyTrace(
                            f"row {ln}: bad header, expected "
                            "'tau_s,px_est,px_err,counts_signal,counts_ref'"
                        )
                    header_seen = True
                    continue
                parts = line.split(",")
                if len(parts) != 5:
                    raise EmptyTrace(f"row {ln}: expected 5 columns, got {len(parts)}")
                try:
                    for c, p in zip(cols, parts):
                        c.append(float(p))
                except ValueError as exc:
                    raise EmptyTrace(f"row {ln}: {exc}") from exc
        if not header_seen:
            raise EmptyTrace("trace file is empty")
        return cls(
            tau_s=np.array(cols[0]), px_est=np.array(cols[1]), px_err=np.array(cols[2]),
            counts_signal=np.array(cols[3], dtype=np.int64),
            counts_ref=np.array(cols[4], dtype=np.int64),
        )


def sample_trace(
    system: SpinSystem,
    taus_s: Sequence[float] | np.ndarray,
    n_pulses: int,
    shots: int,
    contrast: tuple[float, float],
    seed: int = 0,
) -> CpmgTrace:
    """Emulate spin-dependent fluorescence readout of a tau sweep.

    Per point the signal counts are Poisson with mean
    shots * (c1 + (c0 - c1) * P_x); a bright reference at c0 is recorded
    alongside.  Seeds are derived per point, so traces are reproducible and
    independent of evaluation order.
    """
    c0, c1 = contrast
    if shots < 1:
        raise FinepulseError("shots must be >= 1")
    if not (c0 > c1 >= 0.0):
        raise InvalidContrast(f"need c0 > c1 >= 0, got c0={c0}, c1={c1}")
    taus = np.asarray(taus_s, dtype=float)
    px_true = np.atleast_1d(px_multi(system, taus, n_pulses))
    mean_sig = shots * (c1 + (c0 - c1) * px_true)
    counts_sig = np.empty(len(taus), dtype=np.int64)
    counts_ref = np.empty(len(taus), dtype=np.int64)
    for i in range(len(taus)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        counts_sig[i] = rng.poisson(mean_sig[i])
        counts_ref[i] = rng.poisson(shots * c0)
    scale = shots * (c0 - c1)
    px_est = (counts_sig - shots * c1) / scale
    px_err = np.sqrt(np.maximum(counts_sig, 1.0)) / scale
    return CpmgTrace(
        tau_s=taus, px_est=px_est, px_err=px_err,
        counts_signal=counts_sig, counts_ref=counts_ref,
    )
