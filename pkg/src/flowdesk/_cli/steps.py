"""
CLI commands that build and run an experiment step.
"""

import logging

from .._cmdline import _determine_log_configuration, step_from_cmdline
from ..experiments import COMMANDS
from ..exceptions import ValidationError
from .command import Command

logger = logging.getLogger(__name__)


class StepCommand(Command):
    """
    Runs ``step_class``.  Every option after the command name is parsed
    against the step's spec, so ``flowdesk <command> -h`` lists them all.
    """

    step_class = None

    @classmethod
    def get_name(cls):
        return cls.step_class.command

    @classmethod
    def add_subparser(cls, subparsers):
        doc = (cls.step_class.__doc__ or "").strip().splitlines()
        subparsers.add_parser(
            cls.get_name(),
            help=doc[0] if doc else None,
            add_help=False,
        )

    @classmethod
    def run(cls, args):
        step, known = step_from_cmdline(
            cls.step_class, args.extra, prog=f"flowdesk {cls.get_name()}"
        )
        if known.save_parameters:
            step.export_config(known.save_parameters)
            logger.info("Run config saved to %r", known.save_parameters)
            return 0

        log_cfg = _determine_log_configuration(known)
        with log_cfg.context(step.get_flowdesk_loggers()):
            step.run()
        return 0


class ShowConfigCommand(Command):
    """Print the config spec of a command."""

    @classmethod
    def get_name(cls):
        return "show-config"

    @classmethod
    def add_subparser(cls, subparsers):
        parser = subparsers.add_parser(
            cls.get_name(), help="print the config spec of a command"
        )
        parser.add_argument("command", choices=sorted(COMMANDS), help="command name")

    @classmethod
    def run(cls, args):
        if args.extra:
            raise ValidationError(f"unrecognized arguments: {' '.join(args.extra)}")
        COMMANDS[args.command].print_configspec()
        return 0


def step_commands():
    """One `StepCommand` subclass per experiment step."""
    return [
        type(
            f"{step_class.__name__}Command",
            (StepCommand,),
            {"step_class": step_class, "__doc__": step_class.__doc__},
        )
        for step_class in COMMANDS.values()
    ]
