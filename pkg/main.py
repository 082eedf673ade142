"""Entry point for the fence removal toolkit.

Usage: python main.py <synth|train|detect|register|defence|eval> [options]
"""

import sys

from cli.commands import default_manager


def main(argv=None) -> int:
    return default_manager().run(argv)


if __name__ == "__main__":
    sys.exit(main())
