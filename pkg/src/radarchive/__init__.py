"""Versioned, chunked archive for weather radar volume scans.

Raw RDT-RAW sweep files are decoded into a hierarchical radar tree, stored
as compressed content-addressed chunks under git-like snapshots, and
queried in place by the QVP, QPE and point time-series workflows.
"""

from .errors import RadarArchiveError
from .model import MomentKind, RadarSite, RadarTree, Sweep, SweepGeometry, VolumeScan, build_tree, resolve_path
from .txn import Repository

__version__ = "0.1.0"

__all__ = [
    "RadarArchiveError", "MomentKind", "RadarSite", "RadarTree", "Sweep", "SweepGeometry", "VolumeScan",
    "build_tree", "resolve_path", "Repository", "__version__",
]
