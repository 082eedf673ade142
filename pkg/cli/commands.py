"""Command manager and base class for CLI subcommands."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from core.errors import DefenceError
from core.settings import SETTINGS_PATH, RunConfig
from cli.cli_utils import EXIT_FAILURE, setup_logging

logger = logging.getLogger(__name__)


class Command:
    """One subcommand. Subclasses set `name`/`help` and implement `run`."""

    name = ""
    help = ""

    def __init__(self, manager: "CommandManager") -> None:
        self.manager = manager

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def run(self, args: argparse.Namespace, config: RunConfig) -> int:
        raise NotImplementedError


def _key_value(text: str) -> tuple:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="settings file (JSON or key=value text)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument(
        "--set", dest="overrides", action="append", type=_key_value, default=[],
        metavar="KEY=VALUE", help="override one setting; may be repeated",
    )
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    return common


class CommandManager:
    def __init__(self, prog: str = "defence") -> None:
        self.prog = prog
        self._commands: Dict[str, Command] = {}

    def register(self, command_cls) -> Command:
        command = command_cls(self)
        self._commands[command.name] = command
        return command

    @property
    def commands(self) -> List[str]:
        return sorted(self._commands)

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog=self.prog,
            description="Fence detection, frame registration and multi-frame de-fencing.",
        )
        sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
        common = _common_options()
        for name in self.commands:
            command = self._commands[name]
            command_parser = sub.add_parser(name, parents=[common], help=command.help, description=command.help)
            command.add_arguments(command_parser)
        return parser

    def load_config(self, args: argparse.Namespace) -> RunConfig:
        path: Optional[Path] = args.config
        if path is None and SETTINGS_PATH.exists():
            path = SETTINGS_PATH
        config = RunConfig.load(path) if path is not None else RunConfig({})
        overrides = dict(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        return config.with_overrides(overrides) if overrides else config

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """Parse `argv`, dispatch, and map failures to exit codes."""
        args = self.build_parser().parse_args(argv)
        setup_logging(verbose=args.verbose, quiet=args.quiet)
        command = self._commands[args.command]
        try:
            config = self.load_config(args)
            return command.run(args, config)
        except (DefenceError, OSError) as exc:
            logger.error("%s: %s", command.name, exc)
            return EXIT_FAILURE


def default_manager() -> CommandManager:
    from cli.defence_command import DefenceCommand
    from cli.detect_command import DetectCommand
    from cli.eval_command import EvalCommand
    from cli.register_command import RegisterCommand
    from cli.synth_command import SynthCommand
    from cli.train_command import TrainCommand

    manager = CommandManager()
    for command_cls in (SynthCommand, TrainCommand, DetectCommand, RegisterCommand, DefenceCommand, EvalCommand):
        manager.register(command_cls)
    return manager
