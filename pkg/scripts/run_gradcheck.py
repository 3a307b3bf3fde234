#!/usr/bin/env python3
"""Run the gradcheck subcommand with configs/gradcheck.cfg; extra arguments are passed through."""
import sys
from pathlib import Path

from radargate.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    args = ["gradcheck", "--config", str(ROOT / "configs" / "gradcheck.cfg"), "--out", str(ROOT / "runs" / "gradcheck")]
    sys.exit(main(args + sys.argv[1:]))
