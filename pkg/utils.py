"""
Utility functions for the lesion classification pipeline.

This module contains helpers shared across modules: deterministic seed
derivation, flat key-value files, and output directory handling.
"""

import hashlib
import logging
import shutil
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

from config import FAILED_MARKER
from errors import OutputCollisionError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def derive_seed(seed: int, *parts: object) -> int:
    """Mixes a base seed with arbitrary parts into an independent 64-bit seed.

    The result depends only on the values, never on call order, so work can be
    split across workers without changing what each item draws.
    """
    key = ":".join([str(int(seed))] + [str(p) for p in parts])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def format_bool(value: bool) -> str:
    return "true" if value else "false"


def parse_bool(text: str) -> bool:
    """Parses true/false (also 1/0, yes/no) case-insensitively."""
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def write_key_values(path: PathLike, items: Union[Mapping[str, object], Iterable[Tuple[str, object]]]) -> Path:
    """Writes a flat `key=value` file, one pair per line, in the given order."""
    path = Path(path)
    pairs = items.items() if isinstance(items, Mapping) else items
    lines = []
    for key, value in pairs:
        if isinstance(value, bool):
            value = format_bool(value)
        elif value is None:
            value = ""
        lines.append(f"{key}={value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_key_values(path: PathLike) -> Dict[str, str]:
    """Reads a file written by write_key_values (values stay strings)."""
    result: Dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        result[key.strip()] = value.strip()
    return result


def prepare_output_dir(path: PathLike, overwrite: bool = False) -> Path:
    """Creates an output directory, refusing to reuse a non-empty one.

    With overwrite set, the existing directory is removed first so stale files
    from an earlier run never mix with new outputs. A directory holding only a
    FAILED marker counts as empty.
    """
    path = Path(path)
    if path.exists() and any(p.name != FAILED_MARKER for p in path.iterdir()):
        if not overwrite:
            raise OutputCollisionError(
                f"output directory {path} is not empty (pass --overwrite to replace it)"
            )
        logger.warning(f"Overwriting existing output directory {path}")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_failed_marker(directory: PathLike, message: str) -> Optional[Path]:
    """Leaves a FAILED marker with the diagnostic in `directory`."""
    try:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        marker = directory / FAILED_MARKER
        marker.write_text(message.rstrip() + "\n", encoding="utf-8")
        return marker
    except OSError as e:
        logger.error(f"Could not write FAILED marker in {directory}: {e}")
        return None


def clear_failed_marker(directory: PathLike) -> None:
    marker = Path(directory) / FAILED_MARKER
    if marker.exists():
        marker.unlink()
