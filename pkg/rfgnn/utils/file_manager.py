import csv
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Iterable, Sequence

logger = logging.getLogger(__name__)


class OutputDirError(Exception):
    """Output directory exists and is not empty"""
    pass


def prepare_output_dir(directory, force: bool = False) -> Path:
    """
    Create an output directory, refusing to reuse a non-empty one.

    Args:
        directory: Target directory
        force: Delete existing contents instead of refusing

    Returns:
        The directory as a Path
    """
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise OutputDirError(f"output directory {directory} is not empty (use --force to overwrite)")
        logger.warning("Overwriting output directory %s", directory)
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_json(path, payload: Any) -> Path:
    """Deterministic JSON: sorted keys, fixed indent, trailing newline"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
    return path


def format_float(value: float) -> str:
    return repr(float(value))
