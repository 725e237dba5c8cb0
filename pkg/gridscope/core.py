#!/usr/bin/env python3
"""
gridscope core functionality — logging, paths, errors and environment checks
"""

from __future__ import annotations
import importlib
import os
import sys
import tempfile
from pathlib import Path
from typing import Dict, Optional, Union

from . import __version__

BANNER = f"\n=== gridscope — model-free grid state estimation by tensor completion — v{__version__} ===\n"
FOOTER = """
------
Done. Estimated states, metrics and certification reports are in the output directory.
------
"""

# Base dir = gridscope package
BASE_DIR = Path(__file__).resolve().parent

# ===== Bundled Data =====
DATA_DIR = BASE_DIR / "data"
FEEDER_DIR = DATA_DIR / "feeders"
CONFIG_DIR = DATA_DIR / "configs"
DEFAULT_FEEDER = FEEDER_DIR / "default_feeder.txt"
TINY_FEEDER = FEEDER_DIR / "tiny_feeder.txt"

BUNDLED_FEEDERS = {
    "default": DEFAULT_FEEDER,
    "tiny": TINY_FEEDER,
}

# ===== Errors =====
class GridScopeError(Exception):
    """Base class for failures the CLI maps to an exit code."""
    exit_code = 1


class ConfigError(GridScopeError):
    exit_code = 1


class FormatError(ConfigError):
    """Malformed input file; the message is anchored as ``path:line: message``."""

    def __init__(self, path: Union[str, Path], line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class IdentifiabilityError(GridScopeError):
    exit_code = 2

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class SolverError(GridScopeError):
    exit_code = 3


class PowerFlowError(SolverError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"power flow failed at time step {step}: {message}")


# ===== Utilities =====
_QUIET = False


def set_quiet(quiet: bool = True):
    global _QUIET
    _QUIET = quiet


def is_quiet() -> bool:
    return _QUIET


def log(msg: str):
    if not _QUIET:
        print(msg, flush=True)


def ensure_dir(p: Path):
    p.mkdir(parents=True, exist_ok=True)


def atomic_write_bytes(path: Path, data: bytes):
    """Write ``data`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    ensure_dir(path.parent)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def resolve_feeder_path(name: Union[str, Path]) -> Path:
    """Map a bundled feeder name ("default", "tiny") or a filesystem path to a path."""
    if str(name) in BUNDLED_FEEDERS:
        return BUNDLED_FEEDERS[str(name)]
    return Path(name).expanduser()


# ===== Environment =====
def check_environment() -> Dict[str, Optional[str]]:
    tools: Dict[str, Optional[str]] = {"python": sys.version.split()[0]}
    for name in ("numpy", "scipy", "pandas", "tqdm"):
        try:
            tools[name] = getattr(importlib.import_module(name), "__version__", "unknown")
        except ImportError:
            tools[name] = None
    return tools


def print_environment_report(tools: Dict[str, Optional[str]]):
    log("\n[Environment Check]")
    for k, v in tools.items():
        log(f"  - {k:12s}: {v or 'NOT FOUND'}")
    log("\n[Bundled Data Check]")
    log(f"  - default feeder: {'Found' if DEFAULT_FEEDER.exists() else 'NOT FOUND'}")
    log(f"  - tiny feeder:    {'Found' if TINY_FEEDER.exists() else 'NOT FOUND'}")
    log(f"  - configs:        {'Found' if CONFIG_DIR.exists() else 'NOT FOUND'}")
