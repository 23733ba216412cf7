"""Shared bits for the demo scripts."""
import os
from importlib import resources

from absorb.data import load_dataset

DEMO_CSV = resources.files("absorb") / "data" / "demo_experiment3.csv"

# QUICK=1 shrinks every run so the scripts finish in seconds
QUICK = os.environ.get("QUICK") == "1"


def demo_dataset(**options):
    dataset, report = load_dataset(DEMO_CSV, **options)
    return dataset, report


def iterations(full, quick):
    return quick if QUICK else full
