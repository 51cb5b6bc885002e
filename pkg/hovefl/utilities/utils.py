"""
Output workspaces and result writers.

A run writes into a hidden staging directory next to its output directory and only
renames it into place once everything succeeded, so a failed or rejected run leaves
no partial results behind.
"""
import json
import logging
import math
import shutil
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from hovefl.utilities.errors import ConfigError
from hovefl.utilities.logger import clean_logger, setup_logger

FLOAT_FORMAT = "%.12e"
lock = threading.Lock()


@dataclass
class WorkSpace:
    """
    Output workspace of one run or comparison.

    Attributes:
        name (str): logger name
        output_dir (Path): final location of the results
        staging_dir (Path): where results are written until `commit`
        logger (logging.Logger): run logger, writes `run.log` in the staging dir
    """
    name: str
    output_dir: Path
    staging_dir: Path
    logger: logging.Logger

    def path(self, *parts: str) -> Path:
        target = self.staging_dir.joinpath(*parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def commit(self) -> Path:
        """Move the staged results to `output_dir`, replacing an existing directory."""
        clean_logger(self.logger)
        with lock:
            if self.output_dir.exists():
                shutil.rmtree(self.output_dir)
            self.staging_dir.rename(self.output_dir)
        return self.output_dir

    def cleanup(self) -> None:
        """Drop the staged results (used when a run fails)."""
        try:
            clean_logger(self.logger)
        except Exception as e:
            print(f"Failed to clean logger: {e}")
        shutil.rmtree(self.staging_dir, ignore_errors=True)


def prepare_workspace(output_dir: str | Path, overwrite: bool, name: str, printing: bool = True) -> WorkSpace:
    """
    Create the staging directory and run logger for `output_dir`.

    Raises:
        ConfigError: if `output_dir` exists and `overwrite` is false
    """
    output_dir = Path(output_dir)
    if output_dir.exists() and not overwrite:
        raise ConfigError(f"{output_dir} already exists; set overwrite to replace it", field="output_dir")
    output_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{output_dir.name}-", dir=output_dir.parent))
    logger = setup_logger(name, staging / "run.log", printing=printing)
    return WorkSpace(name, output_dir, staging, logger)


def format_float(value: float | None) -> str:
    if value is None:
        return "nan"
    return FLOAT_FORMAT % value


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Comma-separated file with a header row; floats as %.12e, other cells via str()."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_float(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _jsonable(v) for key, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(path: Path, payload: dict) -> None:
    """Indented JSON; non-finite floats become null."""
    path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n", encoding="utf-8")
