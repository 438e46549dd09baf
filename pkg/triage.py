#!/usr/bin/env python3
"""
COVID-19 CT triage from clinical features

Extracts the clinical feature vector from CT volumes and their segmentation
maps, trains boosted decision-tree ensembles on it and produces the evaluation
reports. Run `python triage.py --help` for the subcommands.
"""

from ct_triage.cli import main

if __name__ == "__main__":
    main()
