#!/usr/bin/env python
"""
Launcher for the ShiftTune command line
Usage: python run.py <calibrate|reference|trial|learn|eval|grad-check|report> [options]
"""

import sys
import os

# Add script directory to path
script_dir = os.path.dirname(os.path.abspath(__file__))
if script_dir not in sys.path:
    sys.path.insert(0, script_dir)

from cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
