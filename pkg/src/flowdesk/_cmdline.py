"""
Various utilities to handle running Steps from the commandline.
"""

import argparse
import logging

from . import _log, config_parser
from .exceptions import ValidationError

built_in_configuration_parameters = [
    "config",
    "out",
    "save-parameters",
    "verbose",
    "log-level",
    "log-file",
    "log-stream",
]

logger = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors become `ValidationError` instead of ``SystemExit``."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _build_parent_arg_parser():
    """Build the options shared by every command."""
    parser1 = _ArgumentParser(add_help=False)
    parser1.add_argument(
        "--config",
        type=str,
        default=None,
        help="Run config file (JSON, ASDF or INI); flags override its values",
    )
    parser1.add_argument(
        "--out",
        type=str,
        default=None,
        help="Output directory (same as --out_dir)",
    )
    parser1.add_argument(
        "--save-parameters",
        type=str,
        default=None,
        help="Save the effective run config to this ASDF file and exit",
    )
    parser1.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Turn on all logging messages",
    )
    parser1.add_argument(
        "--log-level",
        type=str,
        default=None,
        help="Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL). "
        "Ignored if 'verbose' is specified.",
    )
    parser1.add_argument(
        "--log-file",
        type=str,
        default=None,
        help="Full path to a file name to record log messages",
    )
    parser1.add_argument(
        "--log-stream",
        type=str,
        default=None,
        help="Log stream for terminal messages (stdout, stderr, or null).",
    )
    return parser1


def _build_arg_parser_from_spec(spec, step_class, parent=None, prog=None):
    """
    Given a configspec, sets up an argparse argument parser that
    understands its arguments.

    The \"path\" in the configspec becomes a dot-separated identifier
    in the commandline arguments.  For example, in the following
    configfile::

        [model]
          [[rope]]
             base = 10000.0

    The "base" variable can be changed with ``--model.rope.base=500``.
    """
    # It doesn't translate the configspec types -- it instead
    # will accept any string.  However, the types of the arguments will
    # later be verified by configobj itself.
    parser = _ArgumentParser(
        prog=prog,
        parents=[parent] if parent is not None else [],
        description=step_class.__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )

    def build_from_spec(subspec, parts=None):
        if parts is None:
            parts = []
        for key, val in subspec.items():
            if isinstance(val, dict):
                build_from_spec(val, [*parts, key])
            else:
                comment = subspec.inline_comments.get(key) or ""
                comment = comment.lstrip("#").strip()
                # Only show default value if it is not None or the empty string
                default_value_string = val.split("(", 1)[1].rsplit(")", 1)[0].strip()
                if default_value_string.split("default=")[-1] in ["None", "''", '""']:
                    help_string = comment
                else:
                    help_string = f"{comment} [{default_value_string}]"
                argument = "--" + ".".join([*parts, key])
                if argument[2:] in built_in_configuration_parameters:
                    raise ValueError(
                        "The Step's spec is trying to override a built-in parameter"
                        f" {argument!r}"
                    )
                parser.add_argument(
                    argument,
                    type=str,
                    help=help_string,
                    metavar="",
                )

    build_from_spec(spec)

    return parser


class FromCommandLine(str):
    """
    We need a way to distinguish between config values that come from
    a config file and those that come from the commandline.  For
    example, configfile paths must be resolved against the location of
    the config file.  Commandline paths must be resolved against the
    current working directory.  By setting all commandline overrides
    as instances of this class, we can later (in `config_parser.py`)
    use isinstance to see where the values came from.
    """


def _override_config_from_args(config, args):
    """
    Overrides any configuration values in `config` with values from the
    parsed commandline arguments `args`.
    """

    def set_value(subconf, key, val):
        root, sep, rest = key.partition(".")
        if rest:
            set_value(subconf.setdefault(root, {}), rest, val)
        else:
            val, comment = config._handle_value(val)
            if isinstance(val, str):
                subconf[root] = FromCommandLine(val)
            else:
                subconf[root] = val

    for key, val in vars(args).items():
        if val is not None:
            set_value(config, key, val)


def _load_config(config_file):
    """
    The run config of ``--config``, or an empty one.

    A saved run config names the step that wrote it; the command being run
    decides the step class, so ``class`` and ``name`` are dropped.
    """
    if config_file is None:
        return config_parser.ConfigObj()
    config = config_parser.load_config_file(config_file)
    for key in ("class", "name"):
        if key in config:
            del config[key]
    return config


def _determine_log_configuration(known):
    """
    Determine and load logging configuration from arguments.

    Parameters
    ----------
    known : argparse.Namespace
        Parsed command line arguments containing logging-related parameters:
        - verbose: Enable all logging messages
        - log_level: Specific log level to set
        - log_file: Path to log file
        - log_stream: Output stream for logs

    Returns
    -------
    log_cfg : LogConfig
        The loaded logging configuration ready for use.
    """
    if known.verbose:
        log_level = "DEBUG"
    elif known.log_level is not None:
        log_level = str(known.log_level).upper()
    else:
        log_level = None

    try:
        return _log.load_configuration(
            log_level=log_level,
            log_file=known.log_file,
            log_stream=known.log_stream,
        )
    except Exception as e:
        raise ValidationError(f"Error parsing logging configuration: {e}") from e


def step_from_cmdline(step_class, args, prog=None):
    """
    Build a step of ``step_class`` from commandline arguments.

    Values are layered as spec defaults, then the ``--config`` file, then
    ``--section.key=value`` flags.  Relative paths in the config file are
    resolved against the file's directory, commandline paths against the
    current directory.

    Parameters
    ----------
    step_class : type
        `~flowdesk.experiments.ExperimentStep` subclass to build.
    args : list of str
        Commandline arguments of the command.
    prog : str, optional
        Program name shown in usage messages.

    Returns
    -------
    step : Step instance
    known : argparse.Namespace
        The parsed built-in options.

    Raises
    ------
    flowdesk.exceptions.ValidationError
        On an unknown flag, an unreadable config file, or a value that does
        not validate.
    """
    parent = _build_parent_arg_parser()
    known, _ = parent.parse_known_args(args)
    config = _load_config(known.config)

    spec = step_class.load_spec_file()
    parser = _build_arg_parser_from_spec(spec, step_class, parent=parent, prog=prog)
    parsed = parser.parse_args(args)
    for dest in (
        "config",
        "out",
        "save_parameters",
        "verbose",
        "log_level",
        "log_file",
        "log_stream",
    ):
        delattr(parsed, dest)

    _override_config_from_args(config, parsed)
    if known.out is not None:
        config["out_dir"] = FromCommandLine(known.out)

    step = step_class.from_config_section(
        config, name=step_class.command, config_file=known.config
    )
    return step, known
