"""
Artifact Writers

Every file goes through a temporary sibling and ``os.replace`` so a killed run
never leaves a half-written artifact behind.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Union

import numpy as np
import pandas as pd

CSV_FLOAT_FORMAT = "%.12g"


def write_bytes_atomic(path: Union[str, Path], payload: bytes) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def write_text_atomic(path: Union[str, Path], text: str) -> Path:
    return write_bytes_atomic(path, text.encode("utf-8"))


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """CSV with a fixed float format and "\\n" line endings, so equal frames give equal bytes."""
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return write_text_atomic(path, text)


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    return write_text_atomic(path, json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_jsonl(records: Iterable[Dict[str, Any]], path: Union[str, Path]) -> Path:
    lines = [json.dumps(record, sort_keys=True, default=_json_default) for record in records]
    return write_text_atomic(path, "\n".join(lines) + "\n")


def read_jsonl(path: Union[str, Path]):
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
