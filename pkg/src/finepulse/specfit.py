"""Hyperfine extraction from CPMG traces.

Stage 1 finds coherence dips and assigns them to (2k-1)-spaced harmonic
ladders, one ladder per nuclear spin.  Stage 2 fits each ladder's positions
to a line through the origin, giving the parallel coupling A.  Stage 3 feeds
that estimate into a bounded nonlinear least-squares fit of the full
single-spin lineshape over a window around one resonance, yielding A and B
with covariance-based uncertainties and a chi-square based rejection flag for
features the single-spin model cannot describe.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.optimize import least_squares
from scipy.signal import find_peaks, peak_widths

from .errors import DegenerateGroup, EmptyTrace, FinepulseError, WindowTooNarrow
from .spinmodel import TWO_PI, CpmgTrace, FieldConfig, _px_even


@dataclass(frozen=True)
class Dip:
    """One detected coherence dip."""

    tau_s: float
    depth: float
    width_s: float
    prominence: float


@dataclass(frozen=True)
class DipSet:
    """Detected dips, optionally labeled with (spin index, harmonic k)."""

    dips: tuple[Dip, ...]
    grouping: dict[int, tuple[int, int]] | None = None

    def __len__(self) -> int:
        return len(self.dips)

    def members(self, spin_index: int) -> list[tuple[Dip, int]]:
        if self.grouping is None:
            return []
        return [
            (self.dips[i], k)
            for i, (s, k) in sorted(self.grouping.items())
            if s == spin_index
        ]

    def spin_indices(self) -> list[int]:
        if self.grouping is None:
            return []
        return sorted({s for s, _ in self.grouping.values()})


def _noise_estimate(trace: CpmgTrace) -> float:
    """Per-point noise scale, from stated errors or first differences."""
    if np.any(trace.px_err > 0):
        return float(np.median(trace.px_err[trace.px_err > 0]))
    diffs = np.abs(np.diff(trace.px_est))
    return float(1.4826 * np.median(diffs) / np.sqrt(2.0))


def detect_dips(
    trace: CpmgTrace,
    smoothing: int = 5,
    min_prominence: float | None = None,
) -> DipSet:
    """Locate local minima of the smoothed trace.

    ``min_prominence`` defaults to five times the per-point noise estimate,
    which sits above the prominence of pure shot-noise wiggles after
    smoothing.  Centroids are refined by parabolic interpolation through the
    three samples around each minimum; widths are full width at half
    prominence.
    """
    if len(trace) < 16:
        raise EmptyTrace(f"need at least 16 trace points, got {len(trace)}")
    tau = trace.tau_s
    if np.any(np.diff(tau) <= 0):
        raise EmptyTrace("tau grid must be strictly increasing")
    y = trace.px_est.astype(float)
    if smoothing > 1:
        y = uniform_filter1d(y, size=int(smoothing), mode="nearest")
    if min_prominence is None:
        min_prominence = 5.0 * _noise_estimate(trace)
    idx, props = find_peaks(-y, prominence=max(min_prominence, 1e-12))
    if len(idx) == 0:
        return DipSet(dips=())
    widths_pts = peak_widths(-y, idx, rel_height=0.5)[0]
    step = float(np.median(np.diff(tau)))
    baseline = float(np.median(y))
    dips = []
    for j, i in enumerate(idx):
        t = tau[i]
        if 0 < i < len(y) - 1:
            a = y[i - 1] - 2.0 * y[i] + y[i + 1]
            if a > 0:
                delta = 0.5 * (y[i - 1] - y[i + 1]) / a
                t = tau[i] + np.clip(delta, -1.0, 1.0) * step
        dips.append(
            Dip(
                tau_s=float(t),
                depth=float(baseline - y[i]),
                width_s=float(widths_pts[j] * step),
                prominence=float(props["prominences"][j]),
            )
        )
    return DipSet(dips=tuple(dips))


def group_harmonics(
    dips: DipSet,
    fieldcfg: FieldConfig,
    a_search_khz: tuple[float, float, float] = (-100.0, 100.0, 0.25),
    tol_s: float = 12e-9,
    k_max: int = 12,
    min_ladder_dips: int = 3,
) -> DipSet:
    """Assign dips to (2k-1) harmonic ladders of candidate parallel couplings.

    Candidates are scored by how many dips fall within ``tol_s`` of their
    predicted positions; the best non-overlapping ladders are claimed
    greedily.  Tightly packed fringe minima all join the same (spin, k) slot.
    A ladder needs ``min_ladder_dips`` matches to be claimed, which keeps
    side-lobe pairs from masquerading as spins; leftovers become
    single-member groups (too small for a line fit).
    """
    if len(dips) == 0:
        return DipSet(dips=dips.dips, grouping={})
    lo, hi, step = a_search_khz
    candidates = np.arange(lo, hi + 0.5 * step, step) * 1e3 * TWO_PI
    taus = np.array([d.tau_s for d in dips.dips])
    proms = np.array([d.prominence for d in dips.dips])
    t_min, t_max = taus.min() - tol_s, taus.max() + tol_s
    two_wl = 2.0 * fieldcfg.larmor_rad_s

    grouping: dict[int, tuple[int, int]] = {}
    claimed = np.zeros(len(taus), dtype=bool)
    spin_index = 0
    while True:
        best = None
        for a in candidates:
            denom = a + two_wl
            if denom <= 0:
                continue
            matched: dict[int, list[int]] = {}
            resid = 0.0
            for k in range(1, k_max + 1):
                tk = (2 * k - 1) * np.pi / denom
                if tk < t_min or tk > t_max:
                    continue
                hit = np.flatnonzero(~claimed & (np.abs(taus - tk) <= tol_s))
                if len(hit):
                    matched[k] = list(hit)
                    resid += float(np.sum(np.abs(taus[hit] - tk)))
            n_hit = sum(len(v) for v in matched.values())
            if n_hit == 0:
                continue
            weight = float(sum(proms[i] for v in matched.values() for i in v))
            score = (n_hit, len(matched), weight, -resid)
            if best is None or score > best[0]:
                best = (score, matched)
        if best is None or best[0][0] < max(min_ladder_dips, 2):
            break
        for k, members in best[1].items():
            for i in members:
                grouping[i] = (spin_index, k)
                claimed[i] = True
        spin_index += 1
    for i in np.flatnonzero(~claimed):
        grouping[int(i)] = (spin_index, 1)
        spin_index += 1
    return DipSet(dips=dips.dips, grouping=grouping)


def linear_fit_a(
    members: list[tuple[Dip, int]],
    fieldcfg: FieldConfig,
) -> tuple[float, float]:
    """Parallel coupling from dip positions: tau_k = pi*(2k-1) / (A + 2*omega_L).

    Prominence-weighted least squares of tau against (2k-1) through the
    origin; slope uncertainty comes from the residual scatter.  Returns
    (A, sigma) in kHz.
    """
    if len(members) < 2:
        raise DegenerateGroup(f"need >= 2 dips for a line fit, got {len(members)}")
    x = np.array([2 * k - 1 for _, k in members], dtype=float)
    y = np.array([d.tau_s for d, _ in members])
    w = np.array([max(d.prominence, 1e-6) for d, _ in members])
    sxx = np.sum(w * x * x)
    slope = np.sum(w * x * y) / sxx
    resid = y - slope * x
    dof = len(members) - 1
    s2 = np.sum(w * resid**2) / dof / (np.mean(w))
    var_slope = s2 / sxx * np.mean(w)
    sigma_slope = np.sqrt(max(var_slope, 0.0))
    a_rad = np.pi / slope - 2.0 * fieldcfg.larmor_rad_s
    sigma_a = np.pi / slope**2 * sigma_slope
    return a_rad / TWO_PI / 1e3, sigma_a / TWO_PI / 1e3


@dataclass(frozen=True)
class FitOptions:
    """Knobs of the detection/fit pipeline."""

    smoothing: int = 5
    min_prominence: float | None = None
    a_search_khz: tuple[float, float, float] = (-100.0, 100.0, 0.25)
    match_tol_ns: float = 12.0
    k_max: int = 12
    min_ladder_dips: int = 3
    bound_khz: float = 1000.0
    chi2_reject: float = 3.0
    window_widths: float = 3.0
    multistart_a: int = 5
    multistart_b: int = 5
    a_span_khz: float = 5.0
    b_grid_khz: tuple[float, float] = (5.0, 250.0)
    b_grid_mode: str = "geom"   # geom | linear; linear suits dense fringe scans
    max_nfev: int = 400
    # Stop multi-starting once a fit reaches this reduced chi-square; the
    # grid order is fixed, so early exit keeps results deterministic.
    early_stop_chi2: float = 1.5


@dataclass(frozen=True)
class ResonanceFit:
    """Result of one bounded lineshape fit."""

    a_khz: float
    a_err_khz: float
    b_khz: float
    b_err_khz: float
    baseline: float
    scale: float
    slope: float
    chi2_red: float
    rejected: bool
    bound_khz: float
    converged: bool
    n_points: int
    window_s: tuple[float, float]


def _lineshape_model(params, tau, omega_l, n_pulses, t_mid, t_span):
    a_khz, b_khz, base, scale, slope = params
    px = _px_even(TWO_PI * a_khz * 1e3, TWO_PI * abs(b_khz) * 1e3, omega_l, tau, n_pulses)
    return base + scale * px + slope * (tau - t_mid) / t_span


def fit_lineshape(
    window: CpmgTrace,
    fieldcfg: FieldConfig,
    n_pulses: int,
    init_a_khz: float,
    options: FitOptions = FitOptions(),
) -> ResonanceFit:
    """Bounded nonlinear least squares of the single-spin lineshape.

    Fits (A, B, baseline, scale, slope) to the window; multi-starts on an
    (A, B) grid around the seed to escape the local minima a single broad dip
    admits.  ``rejected`` flags reduced chi-square above the configured
    threshold, the signature of data outside the single-spin model class
    under the coupling bound.
    """
    if len(window) < 16:
        raise WindowTooNarrow(f"fit window has {len(window)} points, need >= 16")
    i_min = int(np.argmin(window.px_est))
    if i_min in (0, len(window) - 1):
        raise WindowTooNarrow("window edge is the minimum; widen the window")
    tau = window.tau_s
    y = window.px_est
    err = window.px_err
    weighted = bool(np.all(err > 0))
    sig = err if weighted else np.ones_like(y)
    t_mid = float(tau.mean())
    t_span = float(tau.max() - tau.min())
    omega_l = fieldcfg.larmor_rad_s
    bound = options.bound_khz

    def residuals(p):
        return (_lineshape_model(p, tau, omega_l, n_pulses, t_mid, t_span) - y) / sig

    lo = [-bound, 0.0, -1.0, 0.0, -5.0]
    hi = [bound, bound, 2.0, 5.0, 5.0]
    a_grid = np.clip(
        init_a_khz + np.linspace(-options.a_span_khz, options.a_span_khz, options.multistart_a),
        -bound, bound,
    )
    if options.b_grid_mode == "linear":
        b_grid = np.linspace(*options.b_grid_khz, options.multistart_b)
    else:
        b_grid = np.geomspace(*options.b_grid_khz, options.multistart_b)
    b_grid = np.clip(b_grid, 0.0, bound)

    # Multi-start by variable projection: on each (A, B) grid node the three
    # linear parameters are solved exactly, which both ranks the starts by
    # their true attainable cost and keeps the oscillatory ambiguity in A
    # from swallowing a bad baseline guess.
    design = np.empty((len(y), 3))
    design[:, 0] = 1.0
    design[:, 2] = (tau - t_mid) / t_span
    starts = []
    for a0 in a_grid:
        for b0 in b_grid:
            design[:, 1] = _px_even(TWO_PI * a0 * 1e3, TWO_PI * b0 * 1e3, omega_l, tau, n_pulses)
            coef, res_ss, *_ = np.linalg.lstsq(design / sig[:, None], y / sig, rcond=None)
            cost = float(res_ss[0]) if len(res_ss) else float(
                np.sum(((design @ coef) - y) ** 2 / sig**2)
            )
            starts.append((cost, a0, b0, coef))
    starts.sort(key=lambda s: s[0])

    m = len(y)
    n_free = 5
    dof = max(m - n_free, 1)
    best = None
    for cost0, a0, b0, coef in starts[:5]:
        p0 = np.clip([a0, b0, coef[0], coef[1], coef[2]], lo, hi)
        try:
            res = least_squares(
                residuals, p0, bounds=(lo, hi), method="trf",
                max_nfev=options.max_nfev, x_scale=[1.0, 1.0, 0.1, 0.1, 0.1],
            )
        except Exception:
            continue
        if best is None or res.cost < best.cost:
            best = res
        if weighted and 2.0 * best.cost / dof < options.early_stop_chi2:
            break
    if best is None:
        raise FinepulseError("all lineshape fit starts failed")

    chi2_red = float(2.0 * best.cost / dof)
    jac = best.jac
    try:
        cov = np.linalg.inv(jac.T @ jac)
        if not weighted:
            cov = cov * (2.0 * best.cost / dof)
        perr = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        perr = np.full(n_free, np.nan)
    a_fit, b_fit = float(best.x[0]), float(abs(best.x[1]))
    return ResonanceFit(
        a_khz=a_fit,
        a_err_khz=float(perr[0]),
        b_khz=b_fit,
        b_err_khz=float(perr[1]),
        baseline=float(best.x[2]),
        scale=float(best.x[3]),
        slope=float(best.x[4]),
        chi2_red=chi2_red,
        rejected=chi2_red > options.chi2_reject,
        bound_khz=bound,
        converged=bool(best.status > 0),
        n_points=m,
        window_s=(float(tau.min()), float(tau.max())),
    )


@dataclass(frozen=True)
class SpinFit:
    """Aggregated per-spin result of the pipeline.

    Each adequately isolated harmonic window is fit independently; the
    quoted couplings are the inverse-variance combination across windows.
    """

    spin_index: int
    harmonics: tuple[int, ...]
    dip_taus_s: tuple[float, ...]
    a_linear_khz: float | None
    a_linear_err_khz: float | None
    resonances: tuple[tuple[int, ResonanceFit], ...]
    insufficient: bool
    error: str = ""

    @property
    def lineshape(self) -> ResonanceFit | None:
        """The tightest single-window fit (smallest B uncertainty)."""
        fits = [r for _, r in self.resonances]
        if not fits:
            return None
        return min(fits, key=lambda r: r.b_err_khz if np.isfinite(r.b_err_khz) else np.inf)

    def _combine(self, attr: str, err_attr: str) -> tuple[float, float] | None:
        vals = np.array([getattr(r, attr) for _, r in self.resonances])
        errs = np.array([getattr(r, err_attr) for _, r in self.resonances])
        ok = np.isfinite(errs) & (errs > 0)
        if not ok.any():
            return None
        w = 1.0 / errs[ok] ** 2
        return float(np.sum(w * vals[ok]) / np.sum(w)), float(np.sqrt(1.0 / np.sum(w)))

    @property
    def a_khz(self) -> float | None:
        c = self._combine("a_khz", "a_err_khz")
        return None if c is None else c[0]

    @property
    def a_err_khz(self) -> float | None:
        c = self._combine("a_khz", "a_err_khz")
        return None if c is None else c[1]

    @property
    def b_khz(self) -> float | None:
        c = self._combine("b_khz", "b_err_khz")
        return None if c is None else c[0]

    @property
    def b_err_khz(self) -> float | None:
        c = self._combine("b_khz", "b_err_khz")
        return None if c is None else c[1]

    @property
    def rejected(self) -> bool:
        """Majority of the fitted windows exceed the chi-square threshold."""
        flags = [r.rejected for _, r in self.resonances]
        return bool(flags) and sum(flags) * 2 > len(flags)


@dataclass(frozen=True)
class FitReport:
    spins: tuple[SpinFit, ...]
    dipset: DipSet
    n_pulses: int
    b_field_g: float

    def fitted(self) -> list[SpinFit]:
        return [s for s in self.spins if s.lineshape is not None]

    def to_text(self) -> str:
        lines = [
            f"n_pulses: {self.n_pulses}",
            f"b_field_gauss: {self.b_field_g}",
            f"n_dips: {len(self.dipset)}",
            f"n_groups: {len(self.spins)}",
        ]
        for s in self.spins:
            lines.append(f"[spin {s.spin_index}]")
            lines.append(f"  harmonics: {','.join(str(k) for k in s.harmonics)}")
            lines.append(
                "  dip_taus_ns: " + ",".join(f"{t * 1e9:.3f}" for t in s.dip_taus_s)
            )
            if s.insufficient:
                lines.append("  status: insufficient-for-fit")
                continue
            if s.error and not s.resonances:
                lines.append(f"  status: failed ({s.error})")
                continue
            lines.append(
                f"  a_linear_khz: {s.a_linear_khz:.4f} +/- {s.a_linear_err_khz:.4f}"
            )
            if s.resonances:
                lines.append(f"  a_khz: {s.a_khz:.4f} +/- {s.a_err_khz:.4f}")
                lines.append(f"  b_khz: {s.b_khz:.4f} +/- {s.b_err_khz:.4f}")
                lines.append(f"  rejected: {str(s.rejected).lower()}")
                for k, r in s.resonances:
                    lines.append(
                        f"  [k={k}] a={r.a_khz:.4f}+/-{r.a_err_khz:.4f} "
                        f"b={r.b_khz:.4f}+/-{r.b_err_khz:.4f} chi2_red={r.chi2_red:.4f} "
                        f"rejected={str(r.rejected).lower()} "
                        f"window_ns={r.window_s[0] * 1e9:.3f},{r.window_s[1] * 1e9:.3f}"
                    )
        return "\n".join(lines) + "\n"

    CSV_HEADER = (
        "spin_index,harmonic_k,a_khz,a_err_khz,b_khz,b_err_khz,"
        "a_comb_khz,a_comb_err_khz,b_comb_khz,b_comb_err_khz,"
        "a_linear_khz,a_linear_err_khz,chi2_red,rejected,"
        "window_lo_s,window_hi_s,baseline,scale,slope"
    )

    def to_csv(self) -> str:
        """One row per fitted resonance window, with per-spin combined values."""
        rows = [self.CSV_HEADER]
        for s in self.fitted():
            for k, r in s.resonances:
                rows.append(
                    f"{s.spin_index},{k},{r.a_khz:.6f},{r.a_err_khz:.6f},"
                    f"{r.b_khz:.6f},{r.b_err_khz:.6f},"
                    f"{s.a_khz:.6f},{s.a_err_khz:.6f},{s.b_khz:.6f},{s.b_err_khz:.6f},"
                    f"{s.a_linear_khz:.6f},{s.a_linear_err_khz:.6f},"
                    f"{r.chi2_red:.6f},{int(r.rejected)},"
                    f"{r.window_s[0]:.12e},{r.window_s[1]:.12e},"
                    f"{r.baseline:.6f},{r.scale:.6f},{r.slope:.6f}"
                )
        return "\n".join(rows) + "\n"


def read_report_csv(path: str | Path) -> list[dict]:
    """Parse the summary CSV back into row dictionaries (for plotting)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != FitReport.CSV_HEADER:
            raise FinepulseError(f"unrecognized report header: {header!r}")
        names = header.split(",")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names):
                raise FinepulseError(f"row {ln}: expected {len(names)} columns")
            row = dict(zip(names, parts))
            for key in row:
                row[key] = float(row[key])
            rows.append(row)
    return rows


def _harmonic_window(
    cluster: list[float],
    width_s: float,
    foreign_taus: list[float],
    options: FitOptions,
) -> tuple[float, float]:
    """Window around one harmonic's dip cluster, clipped halfway toward any
    foreign dip so neighboring resonances do not leak into the fit."""
    half = options.window_widths * max(width_s, 1e-9)
    w_lo = min(cluster) - half
    w_hi = max(cluster) + half
    for f in foreign_taus:
        if f > max(cluster):
            w_hi = min(w_hi, 0.5 * (max(cluster) + f))
        elif f < min(cluster):
            w_lo = max(w_lo, 0.5 * (min(cluster) + f))
    return w_lo, w_hi


def fit_pipeline(
    trace: CpmgTrace,
    fieldcfg: FieldConfig,
    n_pulses: int,
    options: FitOptions = FitOptions(),
) -> FitReport:
    """detect -> group -> line fit per group -> lineshape fit per resonance.

    Every harmonic of a group whose clipped window still spans at least one
    full width on each side of the dip gets its own lineshape fit; the
    per-spin couplings combine those windows by inverse variance.
    """
    dipset = detect_dips(trace, options.smoothing, options.min_prominence)
    dipset = group_harmonics(
        dipset, fieldcfg, options.a_search_khz, options.match_tol_ns * 1e-9,
        options.k_max, options.min_ladder_dips,
    )
    spins: list[SpinFit] = []
    for s_idx in dipset.spin_indices():
        members = dipset.members(s_idx)
        harmonics = tuple(sorted({k for _, k in members}))
        taus = tuple(d.tau_s for d, _ in members)
        if len(members) < 2:
            spins.append(
                SpinFit(s_idx, harmonics, taus, None, None, (), insufficient=True)
            )
            continue
        try:
            a_lin, a_lin_err = linear_fit_a(members, fieldcfg)
        except DegenerateGroup as exc:
            spins.append(
                SpinFit(s_idx, harmonics, taus, None, None, (), True, str(exc))
            )
            continue
        # Clip windows only against dips claimed by other ladder groups;
        # unclaimed singletons are mostly side lobes of the same resonance,
        # which the single-spin model reproduces.
        ladder_sizes: dict[int, int] = {}
        for g, _k in dipset.grouping.values():
            ladder_sizes[g] = ladder_sizes.get(g, 0) + 1
        foreign = [
            dipset.dips[i].tau_s
            for i, (g, _k) in dipset.grouping.items()
            if g != s_idx and ladder_sizes[g] >= 2
        ]
        fits: list[tuple[int, ResonanceFit]] = []
        last_error = ""
        for k in harmonics:
            k_dips = [d for d, kk in members if kk == k]
            cluster = [d.tau_s for d in k_dips]
            width = max(d.width_s for d in k_dips)
            w_lo, w_hi = _harmonic_window(cluster, width, foreign, options)
            # Require at least one full dip width of clean data on each side.
            if min(cluster) - w_lo < width or w_hi - max(cluster) < width:
                continue
            try:
                fits.append(
                    (k, fit_lineshape(trace.slice(w_lo, w_hi), fieldcfg, n_pulses,
                                      a_lin, options))
                )
            except FinepulseError as exc:
                last_error = str(exc)
        spins.append(
            SpinFit(s_idx, harmonics, taus, a_lin, a_lin_err, tuple(fits), False,
                    "" if fits else last_error or "no harmonic window was fittable")
        )
    return FitReport(
        spins=tuple(spins), dipset=dipset, n_pulses=n_pulses, b_field_g=fieldcfg.b_field_g
    )
