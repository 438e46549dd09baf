import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, TypeVar, Union

import numpy as np

from .errors import IoError, MissingFile

PathLike = Union[str, os.PathLike]
T = TypeVar("T")
R = TypeVar("R")


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """
    Write `data` to `path` through a temporary sibling file and a rename,
    so readers never observe a partially written file.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except OSError as e:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise IoError(f"Cannot write {path}: {e}") from e


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into plain JSON types."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def dumps_json(payload: Dict[str, Any]) -> str:
    return json.dumps(to_jsonable(payload), indent=2, allow_nan=False) + "\n"


def write_json(path: PathLike, payload: Dict[str, Any]) -> None:
    atomic_write_text(path, dumps_json(payload))


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from e


def write_meta_sidecar(csv_path: PathLike, provenance: Optional[Dict[str, Any]]) -> None:
    """Write `<name>.meta.json` next to a CSV output with its provenance block."""
    csv_path = Path(csv_path)
    write_json(csv_path.with_suffix(".meta.json"), {"file": csv_path.name, "provenance": provenance or {}})


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    """Render a table cell such as '0.908±0.017'."""
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed for case/fold/cell `index`, independent of worker scheduling."""
    return int(seed) + int(index)


def get_version() -> str:
    try:
        from importlib.metadata import version

        return version("ct-triage")
    except Exception:
        return "0.1.0"


def run_ordered(fn: Callable[[T], R], items: Iterable[T], max_workers: Optional[int] = None) -> List[R]:
    """
    Apply `fn` to every item on a thread pool and return results in input order.
    The first exception raised by a job propagates after the pool shuts down.
    """
    items = list(items)
    if max_workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]
