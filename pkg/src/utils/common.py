import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd

from services.errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(verbosity: int = 0):
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def load_json_file(filepath: str | Path, default: Dict[str, Any] | None = None) -> Dict[str, Any]:
    if isinstance(filepath, str):
        filepath = Path(filepath)

    if filepath.exists():
        try:
            with filepath.open("r", encoding="utf-8") as f:
                data = json.load(f)
                if isinstance(data, dict):
                    return data
        except (OSError, ValueError) as e:
            logger.warning("Ignoring unreadable %s: %s", filepath, e)

    return default if default is not None else {}


def write_text_atomic(filepath: str | Path, text: str):
    """Write through a temp file in the target directory, then rename over the target."""
    filepath = Path(filepath)
    directory = filepath.parent if str(filepath.parent) else Path(".")
    directory.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(prefix=f".temp_{filepath.name}.", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(temp_name, filepath)
    except BaseException:
        try:
            os.unlink(temp_name)
        except OSError:
            pass
        raise
    logger.info("Wrote %s", filepath)


def save_json_file(filepath, data):
    write_text_atomic(filepath, json.dumps(data, indent=2, default=_json_default, ensure_ascii=False) + "\n")


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def render_csv(header, rows) -> str:
    """CSV text with CRLF line endings; floats round-trip, booleans become 1/0, None is empty."""
    records = [
        [int(cell) if isinstance(cell, (bool, np.bool_)) else cell for cell in row]
        for row in rows
    ]
    frame = pd.DataFrame(records, columns=list(header))
    return frame.to_csv(index=False, lineterminator="\r\n", float_format="%.17g")


def load_key_value_file(filepath: str | Path) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. JSON files are read as JSON."""
    filepath = Path(filepath)
    if not filepath.exists():
        raise ConfigError(f"Config file not found: {filepath}")
    if filepath.suffix.lower() == ".json":
        data = load_json_file(filepath, None)
        if data is None:
            raise ConfigError(f"Config file is not a JSON object: {filepath}")
        return data

    values = {}
    with filepath.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{filepath}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def parse_float_list(value) -> list:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).replace(";", ",").split(",") if v.strip()]


def parse_int_list(value) -> list:
    return [int(round(v)) for v in parse_float_list(value)]


def config_hash(config: Dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, default=_json_default, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def available_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)
