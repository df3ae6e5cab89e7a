"""Entry point: uv run python -m animatable_nerf"""

import sys


def main() -> None:
    from animatable_nerf.cli import run

    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
