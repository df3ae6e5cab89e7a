from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

from animatable_nerf.body_model import BodyFileError, BodyValidationError
from animatable_nerf.checkpoint import CheckpointError
from animatable_nerf.config import Config, ConfigError, load_config

logger = logging.getLogger("animatable_nerf")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_INVALID = 5


@dataclass(frozen=True)
class Option:
    flags: tuple[str, ...]
    kwargs: dict[str, Any]


def option(*flags: str, **kwargs: Any) -> Option:
    return Option(flags, kwargs)


@dataclass
class Command:
    name: str
    description: str
    handler: Callable[[argparse.Namespace, Config], None]
    options: tuple[Option, ...] = field(default_factory=tuple)
    # argparse dest -> config key, applied as explicit overrides
    overrides: dict[str, str] = field(default_factory=dict)


class CommandLine:
    """Registry of subcommands; command modules register themselves on import."""

    def __init__(self, prog: str, description: str) -> None:
        self.prog = prog
        self.description = description
        self.commands: dict[str, Command] = {}

    def command(
        self,
        name: str,
        description: str,
        options: Sequence[Option] = (),
        overrides: dict[str, str] | None = None,
    ) -> Callable:
        def register(handler: Callable[[argparse.Namespace, Config], None]) -> Callable:
            if name in self.commands:
                raise ValueError(f"command {name!r} registered twice")
            self.commands[name] = Command(name, description, handler, tuple(options), dict(overrides or {}))
            return handler

        return register

    def parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog=self.prog, description=self.description)
        subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
        for cmd in self.commands.values():
            sub = subparsers.add_parser(cmd.name, help=cmd.description, description=cmd.description)
            sub.add_argument("--config", help="key-value config file (section.key = value)")
            sub.add_argument("--seed", type=int, help="root random seed (overrides run.seed)")
            sub.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
            sub.add_argument("--log-level", choices=("debug", "info", "warning", "error"), help="log level")
            for opt in cmd.options:
                sub.add_argument(*opt.flags, **opt.kwargs)
        return parser


cli = CommandLine("anerf", "Animatable neural radiance fields from posed monocular frames.")


def _setup_logging(config: Config) -> None:
    level = getattr(logging, config.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        stream=sys.stderr,
    )


def _error(message: object, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"error: {text}", file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    parser = cli.parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    cmd = cli.commands[args.command]
    try:
        overrides: dict[str, object] = {
            "run.seed": args.seed,
            "run.threads": args.threads,
            "run.log_level": args.log_level,
        }
        for dest, key in cmd.overrides.items():
            overrides[key] = getattr(args, dest, None)
        config = load_config(args.config, overrides)
        _setup_logging(config)
        cmd.handler(args, config)
    except FileNotFoundError as e:
        return _error(e, EXIT_MISSING)
    except CheckpointError as e:
        return _error(e, EXIT_CHECKPOINT)
    except (ConfigError, BodyFileError, BodyValidationError, ValueError) as e:
        return _error(e, EXIT_INVALID)
    except Exception as e:
        logger.debug("Command %s failed", cmd.name, exc_info=True)
        return _error(f"{type(e).__name__}: {e}", EXIT_FAILURE)
    return EXIT_OK


# Importing command modules triggers @cli.command() registration
from animatable_nerf.commands import (  # noqa: E402, F401
    animate,
    evaluate,
    extract_mesh,
    render_view,
    show_config,
    synth,
    train,
)
