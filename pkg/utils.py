"""
Utility functions for pruneflow.
Exceptions, run-directory state, artifact writing and content hashing.
"""
import csv
import hashlib
import io
import json
import logging
import os
from typing import Any, Iterable

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


# =============================================================================
# EXCEPTIONS
# =============================================================================

class PruneFlowError(Exception):
    """Base exception for pruneflow."""
    pass


class ShapeError(PruneFlowError, ValueError):
    """Tensor or parameter shapes do not line up."""
    pass


class ConfigError(PruneFlowError, ValueError):
    """Experiment config failed schema validation."""
    pass


class ScheduleError(PruneFlowError, ValueError):
    """Invalid pruning target, schedule or training budget."""
    pass


class ImportanceError(PruneFlowError, ValueError):
    """An importance measure is missing inputs or produced non-finite scores."""
    pass


class FlowError(PruneFlowError):
    """Gradient flow integration left the finite range."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class GroupError(PruneFlowError, KeyError):
    """A prune group key does not exist in the model."""
    pass


class ArtifactError(PruneFlowError):
    """An append-only artifact would be overwritten with different content."""
    pass


# =============================================================================
# HASHING
# =============================================================================

def canonical_json(data: Any) -> bytes:
    """Serialize to canonical JSON bytes (sorted keys, compact separators)."""
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def git_blob_hash(payload: bytes) -> str:
    """
    Content hash in git's blob format.

    Args:
        payload: File content

    Returns:
        str: sha1 of b"blob <len>\\0" + payload
    """
    header = f"blob {len(payload)}\0".encode("ascii")
    return hashlib.sha1(header + payload).hexdigest()


# =============================================================================
# ARTIFACTS
# =============================================================================

def write_artifact(path: str, payload: bytes) -> str:
    """
    Write an artifact into an append-only run directory.

    An existing file with identical bytes is left untouched; an existing
    file with different bytes is never overwritten.

    Args:
        path: Target file path
        payload: File content

    Returns:
        str: git-style blob hash of the content

    Raises:
        ArtifactError: If the file exists with different content
    """
    digest = git_blob_hash(payload)
    if os.path.exists(path):
        with open(path, "rb") as f:
            existing = f.read()
        if existing != payload:
            raise ArtifactError(f"Refusing to overwrite {path}: content differs from previous run")
        logger.debug(f"Artifact unchanged: {path}")
        return digest

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(payload)
    logger.debug(f"Wrote artifact {path} ({len(payload)} bytes)")
    return digest


def csv_bytes(header: Iterable[str], rows: Iterable[Iterable[Any]]) -> bytes:
    """Render rows as CSV bytes with '\\n' line endings and repr-exact floats."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_cell(value) for value in row])
    return buffer.getvalue().encode("utf-8")


def format_cell(value: Any) -> str:
    """Floats are written with repr() so re-reading them is exact."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, np.bool_):
        return "1" if value else "0"
    if isinstance(value, np.floating):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def read_csv(path: str) -> list[dict]:
    """Read a CSV artifact into a list of row dicts."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


# =============================================================================
# RUN STATE
# =============================================================================

def load_state(run_dir: str) -> dict:
    """
    Load the manifest of a run directory.

    Returns:
        dict: Manifest data with defaults if the run is new
    """
    default_state = {
        "config_hash": "",
        "seeds": [],
        "artifacts": {},
        "timings": {},
        "checks": {},
    }

    path = os.path.join(run_dir, MANIFEST_FILE)
    try:
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                state = json.load(f)
                return {**default_state, **state}
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Failed to load manifest {path}: {e}")

    return default_state


def save_state(run_dir: str, state: dict) -> bool:
    """
    Save the manifest of a run directory.

    The manifest is the one file a rerun rewrites: timings change between
    runs while the artifacts it lists do not.

    Returns:
        bool: True if successful
    """
    path = os.path.join(run_dir, MANIFEST_FILE)
    try:
        os.makedirs(run_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(state, f, indent=2, sort_keys=True)
        return True
    except OSError as e:
        logger.error(f"Failed to save manifest {path}: {e}")
        return False
