"""Shared helpers for the experiment scripts."""

import argparse
import time
from pathlib import Path

from dynattack.metrics import serialize_report


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--seeds", type=int, default=10, help="number of paired seeds (0..n-1)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("results"))
    return p


def save(reports, out: Path, name: str) -> Path:
    path = out / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}.csv"
    serialize_report(reports, path, "csv")
    return path
