#!/usr/bin/env python3
"""
Run the dynamic-spike command line from a source checkout

Puts the repository root on sys.path so `tools`, `pipelines` and `utils`
import without installing, then hands the arguments to main.main, e.g.

    python run.py experiment --config configs/experiment.json --trials 200
"""
import sys
import os

current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, current_dir)

from main import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
