"""Command line: simulate, validate, hover analysis and UVDAR sequence sets.

Exit codes: 0 success, 1 invalid input (scenario, catalog name, arguments), 2 runtime error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import propulsion, uvdar
from .scenario import ParseError, ValidationError, load_scenario
from .sim import SimulationPanic, run

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Invalid(click.ClickException):
    exit_code = EXIT_INVALID


class _Runtime(click.ClickException):
    exit_code = EXIT_RUNTIME


def _load(scenario: str):
    try:
        return load_scenario(scenario)
    except (ParseError, ValidationError) as e:
        raise _Invalid(str(e)) from None


@click.group()
def cli():
    """Multi-UAV flight stack simulator."""


@cli.command()
@click.argument("scenario")
def validate(scenario):
    """Check a scenario file (or bundled scenario name) and list every problem."""
    sc = _load(scenario)
    click.echo(f"ok: {sc.name}, {len(sc.uavs)} uav(s), {sc.duration:g} s")


@cli.command()
@click.argument("scenario")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for CSV logs and the report (default: runs/<scenario name>).")
def simulate(scenario, out_dir):
    """Run a scenario and write per-UAV CSV logs plus a report."""
    sc = _load(scenario)
    out = Path(out_dir) if out_dir else Path("runs") / sc.name
    try:
        report = run(sc, out)
    except SimulationPanic as e:
        raise _Runtime(f"simulation panic: {e}") from None
    click.echo(report.to_text(), nl=False)
    r_min = sc.avoidance.r_min
    if report.below(r_min):
        click.echo(f"warning: min separation {report.min_separation:.3f} m below r_min {r_min:g} m")
    click.echo(f"logs: {out}  wall time: {report.wall_time:.1f} s")


@cli.command()
@click.argument("platform")
@click.option("--payload", type=float, default=0.0, show_default=True, help="Payload mass in kg.")
@click.option("--curve", default="9450", show_default=True, help="Propulsion curve name.")
@click.option("--usable-fraction", type=float, default=propulsion.DEFAULT_USABLE_FRACTION, show_default=True)
@click.option("--avionics-power", type=float, default=propulsion.DEFAULT_AVIONICS_POWER, show_default=True,
              help="W")
def hover(platform, payload, curve, usable_fraction, avionics_power):
    """Hover thrust, throttle and endurance of a catalog platform."""
    try:
        spec = propulsion.load_platform(platform)
        c = propulsion.load_curve(curve)
    except propulsion.UnknownCatalogEntry as e:
        raise _Invalid(e.args[0]) from None
    if payload < 0:
        raise _Invalid("payload must be non-negative")
    try:
        res = propulsion.hover_analysis(spec, c, payload, usable_fraction, avionics_power)
    except propulsion.Unreachable as e:
        raise _Runtime(str(e)) from None
    click.echo(f"platform {spec.name} ({spec.rotor_count} rotors, {spec.layout}), curve {c.name}, "
               f"payload {payload:g} kg")
    click.echo(f"per-motor thrust {res.per_motor_thrust:.3f} N")
    click.echo(f"throttle {res.throttle:.1f} %")
    click.echo(f"per-motor power {res.per_motor_power:.1f} W, total electrical power {res.electrical_power:.1f} W")
    click.echo(f"endurance {res.endurance:.2f} min")


@cli.command("uvdar-set")
@click.option("--length", "length", type=int, required=True, help="Sequence length L.")
@click.option("--max-off-run", "max_off_run", type=int, required=True,
              help="Longest allowed circular run of zeros.")
def uvdar_set(length, max_off_run):
    """Print one representative per admissible rotation class."""
    try:
        params = uvdar.SequenceSetParams(length, max_off_run)
    except ValueError as e:
        raise _Invalid(str(e)) from None
    members = uvdar.generate_set(params)
    click.echo(uvdar.export_set(params, members), nl=False)
    click.echo(f"# {len(members)} sequences")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mrs-microstack", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        code = e.exit_code if isinstance(e, (_Invalid, _Runtime)) else EXIT_INVALID
        return code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except Exception as e:  # anything unexpected is a runtime failure
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
