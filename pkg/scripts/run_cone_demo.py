#!/usr/bin/env python3
"""Run the cone-demo subcommand with configs/cone_demo.cfg; extra arguments are passed through."""
import sys
from pathlib import Path

from radargate.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    args = ["cone-demo", "--config", str(ROOT / "configs" / "cone_demo.cfg"), "--out", str(ROOT / "runs" / "cone_demo")]
    sys.exit(main(args + sys.argv[1:]))
