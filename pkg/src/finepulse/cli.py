"""Batch command-line front end.

Commands: compile, verify, simulate, fit, plot.  Exit codes: 0 success,
1 domain error (bad physics, budget, malformed data), 2 usage error.
All outputs are written atomically (temp file + rename) and are byte-stable
for a fixed config and seed.
"""

from __future__ import annotations

import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import dacsim
from .config import ExperimentConfig, build_layout, build_programs, load_config
from .errors import FinepulseError
from .sequencer import compile_program
from .specfit import fit_pipeline, read_report_csv
from .spinmodel import CpmgTrace, sample_trace
from .waveform import CHANNEL_CAPACITY


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load(config_path: str, seed: int | None) -> ExperimentConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, noise=replace(cfg.noise, seed=seed))
    return cfg


@click.group()
@click.option("--seed", type=int, default=None, help="Override noise.seed from the config.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel workers for sweep processing.")
@click.pass_context
def main(ctx: click.Context, seed: int | None, jobs: int) -> None:
    """Pulse compilation, sample-exact playback checks, CPMG simulation and fitting."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["jobs"] = max(1, jobs)


def _compile_one(args):
    cfg_path, index, out_dir = args
    cfg = load_config(cfg_path)
    programs = build_programs(cfg)
    layout = build_layout(cfg)
    prog = programs[index]
    compiled = compile_program(prog, layout, freq_word=cfg.carrier_word())
    name = f"{cfg.sequence.type}_{index:06d}.txt"
    _atomic_write_text(Path(out_dir) / name, compiled.to_text())
    return layout.total_samples


@main.command("compile")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for instruction-stream files, one per sweep point.")
@click.pass_context
def cmd_compile(ctx: click.Context, config_path: str, out_dir: str) -> None:
    """Compile the configured sweep into sequencer instruction files."""
    try:
        cfg = _load(config_path, ctx.obj["seed"])
        programs = build_programs(cfg)
        layout = build_layout(cfg)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        jobs = ctx.obj["jobs"]
        args = [(config_path, i, out_dir) for i in range(len(programs))]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                list(pool.map(_compile_one, args, chunksize=16))
        else:
            for a in args:
                _compile_one(a)
        click.echo(
            f"compiled {len(programs)} programs; bank memory "
            f"{layout.total_samples}/{CHANNEL_CAPACITY} samples"
        )
    except FinepulseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("verify")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def cmd_verify(ctx: click.Context, config_path: str) -> None:
    """Compile, render, and measure the sweep; exit 0 only on exact timing."""
    try:
        cfg = _load(config_path, ctx.obj["seed"])
        programs = build_programs(cfg)
        layout = build_layout(cfg)
        word = cfg.carrier_word()
        max_err = 0
        n_pulses = 0
        residues_seen: set[int] = set()
        for prog in programs:
            compiled = compile_program(prog, layout, freq_word=word)
            if not compiled.predicted_edges:
                continue
            stream = dacsim.render(compiled)
            report = dacsim.measure_edges(stream, cfg=cfg.clock)
            if len(report.measured_starts) != len(compiled.predicted_edges):
                raise FinepulseError(
                    f"sweep point {prog.sweep_value}: found "
                    f"{len(report.measured_starts)} pulses, expected "
                    f"{len(compiled.predicted_edges)}"
                )
            errs = np.abs(
                np.asarray(report.measured_starts) - np.asarray(compiled.predicted_edges)
            )
            max_err = max(max_err, int(errs.max()))
            n_pulses += len(report.measured_starts)
            residues_seen.update(report.residues)
        click.echo(f"checked {len(programs)} programs, {n_pulses} pulses")
        click.echo(f"fine residues exercised: {sorted(residues_seen)}")
        click.echo(f"max edge error: {max_err} samples")
        sys.exit(0 if max_err == 0 else 1)
    except FinepulseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("simulate")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_csv", required=True, type=click.Path(dir_okay=False),
              help="Output trace CSV.")
@click.pass_context
def cmd_simulate(ctx: click.Context, config_path: str, out_csv: str) -> None:
    """Generate a synthetic CPMG trace for the configured spin system."""
    try:
        cfg = _load(config_path, ctx.obj["seed"])
        clock = cfg.clock
        sweep = cfg.sequence.sweep_samples(clock)
        taus_s = np.asarray(sweep, dtype=float) * clock.sample_period_s
        system = cfg.system.spin_system()
        trace = sample_trace(
            system, taus_s, cfg.sequence.n_pulses, cfg.noise.shots,
            (cfg.noise.c0, cfg.noise.c1), seed=cfg.noise.seed,
        )
        out = Path(out_csv)
        out.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=".tmp-", suffix=".csv")
        os.close(fd)
        trace.write_csv(tmp)
        os.replace(tmp, out)
        click.echo(f"wrote {len(trace)} points to {out}")
    except FinepulseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("fit")
@click.argument("trace_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for report.txt, report.csv, and overlay.svg.")
@click.pass_context
def cmd_fit(ctx: click.Context, trace_csv: str, config_path: str, out_dir: str) -> None:
    """Run the hyperfine extraction pipeline on a trace CSV."""
    try:
        cfg = _load(config_path, ctx.obj["seed"])
        trace = CpmgTrace.read_csv(trace_csv)
        fieldcfg = cfg.system.spin_system().field
        report = fit_pipeline(trace, fieldcfg, cfg.sequence.n_pulses, cfg.fit)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out / "report.txt", report.to_text())
        _atomic_write_text(out / "report.csv", report.to_csv())
        from .plotting import plot_trace

        rows = [r for r in read_report_csv(out / "report.csv")]
        fd, tmp = tempfile.mkstemp(dir=out, prefix=".tmp-", suffix=".svg")
        os.close(fd)
        plot_trace(trace, tmp, rows, fieldcfg, cfg.sequence.n_pulses,
                   title=f"N={cfg.sequence.n_pulses} fit")
        os.replace(tmp, out / "overlay.svg")
        for s in report.fitted():
            click.echo(
                f"spin {s.spin_index}: A = {s.a_khz:+.3f} +/- {s.a_err_khz:.3f} kHz, "
                f"B = {s.b_khz:.3f} +/- {s.b_err_khz:.3f} kHz"
                + (" [rejected]" if s.rejected else "")
            )
        if not report.fitted():
            click.echo("no fittable spin groups found")
    except FinepulseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("plot")
@click.argument("trace_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_csv", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Fit report CSV to overlay.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Config (needed with --report for field/N).")
@click.option("--out", "out_svg", required=True, type=click.Path(dir_okay=False),
              help="Output SVG path.")
@click.pass_context
def cmd_plot(ctx: click.Context, trace_csv: str, report_csv: str | None,
             config_path: str | None, out_svg: str) -> None:
    """Render a trace (optionally with fit overlays) to SVG."""
    try:
        from .plotting import plot_trace

        trace = CpmgTrace.read_csv(trace_csv)
        rows = None
        fieldcfg = None
        n_pulses = None
        if report_csv is not None:
            if config_path is None:
                raise click.UsageError("--report requires --config for field and N")
            cfg = _load(config_path, ctx.obj["seed"])
            rows = read_report_csv(report_csv)
            fieldcfg = cfg.system.spin_system().field
            n_pulses = cfg.sequence.n_pulses
        out = Path(out_svg)
        out.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=".tmp-", suffix=".svg")
        os.close(fd)
        plot_trace(trace, tmp, rows, fieldcfg, n_pulses)
        os.replace(tmp, out)
        click.echo(f"wrote {out}")
    except FinepulseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
