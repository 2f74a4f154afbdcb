#!/usr/bin/env python3
"""
Distributional Anomaly Detector - Main Application Entry Point

Command-line tool that models time series of distributions with a recurrent
Dirichlet model and flags intervals outside the predictive credible region.
Subcommands: simulate, train, detect, evaluate and experiment.
"""

import sys
import os

# Add the src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

try:
    from cli.commands import main
except ImportError as e:
    print(f"Error importing required modules: {e}", file=sys.stderr)
    print("Please install required dependencies: pip install -r requirements.txt", file=sys.stderr)
    sys.exit(1)


if __name__ == "__main__":
    sys.exit(main())
