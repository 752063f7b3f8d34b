"""Command-line entry point: ``toggle-fqi <command> [--config PATH] ...``.

Exit codes: 0 success, 1 validation error or missing prerequisite,
2 runtime failure, 3 a reproduce-* target ran but its acceptance condition
was not met.
"""
from __future__ import annotations

import json
import logging
import sys

import click

from .experiments import COMMANDS, ConfigError, ExperimentConfig, MissingPrerequisite, run_experiment
from .model import PRESETS

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_UNMET = 0, 1, 2, 3


def _run(command: str, config_path, seed, out, preset_name) -> int:
    try:
        cfg = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
        cfg = cfg.with_overrides(seed=seed, out=out, preset_name=preset_name)
        summary = run_experiment(cfg, command)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        return EXIT_INVALID
    except MissingPrerequisite as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported and mapped to the runtime exit code
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    click.echo(json.dumps(summary, sort_keys=True))
    if command.startswith("reproduce-") and not summary["success"]:
        return EXIT_UNMET
    return EXIT_OK


def _common(fn):
    fn = click.option("--preset", "preset_name",
                      help=f"Parameter preset of the training system ({', '.join(sorted(PRESETS))}).")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), help="Output directory.")(fn)
    fn = click.option("--seed", type=int, help="Master seed (overrides the config file).")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      help="Experiment config (INI).")(fn)
    return fn


class _Cli(click.Group):
    """Maps command-line usage errors to the validation exit code."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            return super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_RUNTIME)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_INVALID)


@click.group(cls=_Cli)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Fitted Q Iteration control of the genetic toggle switch."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


def _make_command(name: str):
    @_common
    def command(config_path, seed, out, preset_name):
        sys.exit(_run(name, config_path, seed, out, preset_name))

    command.__doc__ = COMMANDS[name].__doc__ or f"Run the {name} stage."
    return main.command(name)(command)


for _name in COMMANDS:
    _make_command(_name)


@main.command("show-config")
@_common
def show_config(config_path, seed, out, preset_name):
    """Print the fully rendered configuration."""
    try:
        cfg = ExperimentConfig.load(config_path) if config_path else ExperimentConfig()
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_INVALID)
    click.echo(cfg.with_overrides(seed=seed, out=out, preset_name=preset_name).render(), nl=False)


if __name__ == "__main__":
    main()
