#!/usr/bin/env python3
"""Run the complexity subcommand with configs/complexity.cfg; extra arguments are passed through."""
import sys
from pathlib import Path

from radargate.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    args = ["complexity", "--config", str(ROOT / "configs" / "complexity.cfg"), "--out", str(ROOT / "runs" / "complexity")]
    sys.exit(main(args + sys.argv[1:]))
