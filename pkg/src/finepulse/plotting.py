"""Figure rendering for traces and fit overlays.

All output is static SVG written next to the delimited data.  Matplotlib's
date metadata and hash salt are pinned so repeated runs are byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .spinmodel import TWO_PI, CpmgTrace, FieldConfig, _px_even

matplotlib.rcParams["svg.hashsalt"] = "finepulse"


def _model_curve(row: dict, field: FieldConfig, n_pulses: int, tau: np.ndarray) -> np.ndarray:
    px = _px_even(
        TWO_PI * row["a_khz"] * 1e3,
        TWO_PI * row["b_khz"] * 1e3,
        field.larmor_rad_s,
        tau,
        n_pulses,
    )
    t_mid = 0.5 * (row["window_lo_s"] + row["window_hi_s"])
    t_span = row["window_hi_s"] - row["window_lo_s"]
    return row["baseline"] + row["scale"] * px + row["slope"] * (tau - t_mid) / t_span


def plot_trace(
    trace: CpmgTrace,
    out_svg: str | Path,
    report_rows: list[dict] | None = None,
    field: FieldConfig | None = None,
    n_pulses: int | None = None,
    title: str = "",
) -> None:
    """Trace with optional fitted-model overlays and resonance markers."""
    fig, ax = plt.subplots(figsize=(9.0, 4.0))
    tau_us = trace.tau_s * 1e6
    if np.any(trace.px_err > 0):
        ax.errorbar(
            tau_us, trace.px_est, yerr=trace.px_err, fmt=".", ms=2.5,
            color="#46688e", ecolor="#b9c9d9", elinewidth=0.6, label="data",
        )
    else:
        ax.plot(tau_us, trace.px_est, ".", ms=2.5, color="#46688e", label="data")
    if report_rows and field is not None and n_pulses is not None:
        colors = ["#c23b22", "#2e7d32", "#7b1fa2", "#ef6c00", "#00695c"]
        seen = set()
        for row in report_rows:
            sel = (trace.tau_s >= row["window_lo_s"]) & (trace.tau_s <= row["window_hi_s"])
            if sel.sum() < 2:
                continue
            tau_w = trace.tau_s[sel]
            dense = np.linspace(tau_w.min(), tau_w.max(), max(4 * sel.sum(), 256))
            curve = _model_curve(row, field, n_pulses, dense)
            idx = int(row["spin_index"])
            color = colors[idx % len(colors)]
            label = None
            if idx not in seen:
                seen.add(idx)
                label = (
                    f"spin {idx}: A={row['a_comb_khz']:.2f} kHz, "
                    f"B={row['b_comb_khz']:.2f} kHz"
                )
            ax.plot(dense * 1e6, curve, "-", lw=1.2, color=color, label=label)
            marker = 0.5 * (row["window_lo_s"] + row["window_hi_s"]) * 1e6
            ax.axvline(marker, color=color, lw=0.5, ls="--", alpha=0.5)
    ax.set_xlabel("tau (us)")
    ax.set_ylabel("P_x")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_stream_segment(
    samples: np.ndarray,
    rate_hz: float,
    out_svg: str | Path,
    start: int = 0,
    stop: int | None = None,
) -> None:
    """Raw rendered output samples over a window, for debugging pulse edges."""
    stop = len(samples) if stop is None else stop
    seg = samples[start:stop]
    t_ns = (np.arange(start, stop)) / rate_hz * 1e9
    fig, ax = plt.subplots(figsize=(9.0, 3.0))
    ax.step(t_ns, seg, where="post", lw=0.7, color="#46688e")
    ax.set_xlabel("time (ns)")
    ax.set_ylabel("DAC output (LSB)")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)
