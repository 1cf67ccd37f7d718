#!/usr/bin/env python3
"""
maxprune CLI

Command-line entry point for training, pruning and evaluating the maxout
LeNet networks. Run ``./scripts/maxprune_cli.py --help`` for the commands.
"""

import os
import sys

# Add the repository root to the path
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(PROJECT_ROOT)

try:
    from src.maxprune.cli import main
except ImportError as exc:
    print(
        f"Error: Unable to import maxprune ({exc}). Install requirements.txt and run from the repository root."
    )
    sys.exit(1)


if __name__ == "__main__":
    main()
