#!/usr/bin/env python3
"""Compatibility shim; the CLI lives in src/cli.py."""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
