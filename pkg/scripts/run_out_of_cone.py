#!/usr/bin/env python3
"""Run the train subcommand with configs/out_of_cone.cfg; extra arguments are passed through."""
import sys
from pathlib import Path

from radargate.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    args = ["train", "--config", str(ROOT / "configs" / "out_of_cone.cfg"), "--out", str(ROOT / "runs" / "out_of_cone")]
    sys.exit(main(args + sys.argv[1:]))
