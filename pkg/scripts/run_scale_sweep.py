#!/usr/bin/env python3
"""Run the scale-sweep subcommand with configs/scale_sweep.cfg; extra arguments are passed through."""
import sys
from pathlib import Path

from radargate.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    args = ["scale-sweep", "--config", str(ROOT / "configs" / "scale_sweep.cfg"), "--out", str(ROOT / "runs" / "scale_sweep")]
    sys.exit(main(args + sys.argv[1:]))
