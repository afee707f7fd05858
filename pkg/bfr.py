#!/usr/bin/env python3
"""
bfrffusion command line: degrade, train, restore, eval, gradcheck, ablate.
Run `python bfr.py <command> --help` for the flags of each command.
"""

import sys

from bfrffusion.cli import main

if __name__ == "__main__":
    sys.exit(main())
