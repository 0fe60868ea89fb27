"""gplmt: declarative orchestration of distributed experiments.

Experiments are written in a small XML language (targets, tasklists, steps)
and executed by a deterministic async engine over pluggable transports
(local shell, ssh, PlanetLab slices, or an offline mock).
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

__version__ = "1.0.0"


def fixture_path(name: str) -> Path:
    """Absolute path of a bundled example experiment or mock script.

    ``name`` is relative to the packaged ``fixtures`` directory, e.g.
    ``"listing1.xml"`` or ``"scripts/ping.json"``.
    """
    base = resources.files(__package__).joinpath("fixtures")
    p = Path(str(base)) / name
    if not p.exists():
        raise FileNotFoundError(name)
    return p
