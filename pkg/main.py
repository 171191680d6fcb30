"""Command-line entry point: ``python main.py <run|assign|verify|export-mps> ...``."""

import sys

from app.cli import main

if __name__ == "__main__":
    sys.exit(main())
