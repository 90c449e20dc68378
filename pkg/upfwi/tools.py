import os
import json
import hashlib
from pathlib import Path
from contextlib import contextmanager

from . import config


def custom_warning(message, category, filename, lineno, file=None, line=None):
    if config.show_warnings:
        print(f"{message} 👉 {os.path.basename(filename)}:{lineno}")


def custom_progress(message):
    if config.show_progress:
        print(message)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    '''
    Short, stable fingerprint of a JSON-serializable configuration
    :param obj: dictionary (or anything json can dump)
    :return: 16 hex digits of the SHA-256 of its canonical JSON
    '''
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"🚨 JSON file '{path.absolute()}' not found")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"🚨 File '{path.absolute()}' is not valid JSON ({e})")


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=4, sort_keys=True)
            f.write("\n")


@contextmanager
def atomic_path(path):
    """Yields a temporary sibling path that replaces 'path' only if the block finishes without errors."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_csv(path, table) -> None:
    with atomic_path(path) as tmp:
        table.to_csv(tmp, index=False)


def json_safe(value):
    # Infinite and NaN floats are not valid JSON, they are written as null
    if isinstance(value, float) and (value != value or value in (float("inf"), float("-inf"))):
        return None
    return value


def append_json_line(path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps({k: json_safe(v) for k, v in record.items()}, sort_keys=True) + "\n")


def read_json_lines(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
