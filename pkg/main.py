#!/usr/bin/env python
"""Main entry point for the AntiSD trainer."""

import sys
from src.antisd.cli import main


if __name__ == "__main__":
    sys.exit(main())
