#!/usr/bin/env python3
"""
FGReID command-line launcher

Usage:
    python run_fgreid.py synth-gen --output data/
    python run_fgreid.py train --preset desk --output runs/desk
    python run_fgreid.py extract --checkpoint runs/desk/model.fgrd --manifest data/query.jsonl --output query.fgrd
    python run_fgreid.py eval --query query.fgrd --gallery gallery.fgrd --rerank
"""

import sys

from fgreid.cli import main

if __name__ == '__main__':
    sys.exit(main())
