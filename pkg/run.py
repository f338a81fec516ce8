#!/usr/bin/env python3
"""
Simple run script for ScaleFusionNet
"""

import sys

from src.cli import main


def main_entry():
    """Main entry point for the command line"""
    # --debug is kept as a shortcut for --log-level DEBUG
    argv = sys.argv[1:]
    if '--debug' in argv or '-d' in argv:
        argv = ['--log-level', 'DEBUG'] + [a for a in argv if a not in ('--debug', '-d')]
    return main(argv)


if __name__ == '__main__':
    sys.exit(main_entry())
