"""
Main function and argument parser for flowdesk.
"""

import argparse
import sys
import traceback

from ..exceptions import (
    FlowdeskException,
    FlowdeskExitException,
    GradientCheckError,
    NumericError,
)
from .steps import ShowConfigCommand, step_commands

# New subclasses of Command must be imported
# and appended to this list before they'll
# become available in the CLI:
_COMMAND_CLASSES = [
    *step_commands(),
    ShowConfigCommand,
]

# Exit status of each failure class; other flowdesk errors (an invalid
# config, a malformed input file, a bad checkpoint) exit with 1.
_EXIT_STATUS = {
    NumericError: 2,
    GradientCheckError: 3,
}


def handle_args(raw_args):
    """
    Parse CLI arguments and run the command.  Does not catch exceptions.

    Parameters
    ----------
    raw_args : list of str
        Command-line arguments (excluding the "flowdesk" command itself).

    Returns
    -------
    int
        Exit status.
    """
    parser = _get_parser()
    args, extra = parser.parse_known_args(raw_args)
    args.extra = extra

    if args.version:
        _print_versions()
        return 0

    if args.command_name is None:
        parser.print_help()
        return 0

    command_class = next(
        c for c in _COMMAND_CLASSES if c.get_name() == args.command_name
    )

    return command_class.run(args)


def exit_status(error):
    """Exit status of ``error``."""
    if isinstance(error, FlowdeskExitException):
        return error.exit_status
    for error_class, status in _EXIT_STATUS.items():
        if isinstance(error, error_class):
            return status
    return 1


def main(argv=None):
    """
    Main function for flowdesk CLI.  Registered with the console_scripts
    entry point as 'flowdesk'.  Also called from flowdesk.__main__.

    Raises
    ------
    SystemExit
        In all scenarios.
    """
    try:
        sys.exit(handle_args(sys.argv[1:] if argv is None else argv))
    except FlowdeskException as e:
        print(f"flowdesk: error: {e}", file=sys.stderr)
        sys.exit(exit_status(e))
    except Exception:
        traceback.print_exc(file=sys.stderr)
        sys.exit(1)


def _get_parser():
    parser = argparse.ArgumentParser("flowdesk", description="flowdesk CLI")
    parser.add_argument(
        "--version",
        help="print version information and exit",
        action="store_true",
    )

    subparsers = parser.add_subparsers(dest="command_name", title="commands")

    for command_class in _COMMAND_CLASSES:
        command_class.add_subparser(subparsers)

    return parser


def _print_versions():
    """
    Print the flowdesk version and those of its numerical stack.
    """
    import numpy
    import torch

    import flowdesk

    print(f"flowdesk: {flowdesk.__version__}")
    print(f"numpy: {numpy.__version__}")
    print(f"torch: {torch.__version__}")
