from __future__ import annotations

import argparse
import sys

from animatable_nerf.cli import cli
from animatable_nerf.config import Config, format_config


@cli.command(
    name="show-config",
    description="Print the effective configuration in config-file format.",
)
def command_show_config(args: argparse.Namespace, config: Config) -> None:
    sys.stdout.write(format_config(config))
