
import os
import re
import hashlib
from pathlib import Path
from typing import Any, Iterable, List, Tuple

import numpy as np
from PIL import Image
from sqlblock.utils.json import json_dumps, json_loads

from .exceptions import InvalidRecordId, IoError

VALID_ID_PATTERN = re.compile("^[a-zA-Z0-9_-]+$")
VALID_ID_STR = (
    "allowing only numbers, uppercase and lowercase letters,"
    " '-' and '_' symbols"
)

THREADS_ENV = "AXISFORGE_THREADS"


def check_record_id(name):
    if not name:
        raise InvalidRecordId("The record id is empty")

    if not VALID_ID_PATTERN.match(name):
        raise InvalidRecordId(
            f"the record id '{name}' contains illegal characters, {VALID_ID_STR}")

    if len(name) > 127:
        raise InvalidRecordId(
            "the record id is longer than max length 127.")


def derive_seed(global_seed: int, *parts: Any) -> int:
    """
    Derive a stable 64-bit seed from the global seed and any labels, such as
    a record id. Independent of PYTHONHASHSEED and of process layout.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(global_seed)).encode("utf-8"))
    for part in parts:
        h.update(b"%")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def make_rng(global_seed: int, *parts: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(global_seed, *parts))


def worker_count(deterministic: bool = False) -> int:
    if deterministic:
        return 1

    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            return 1

    return max(1, min(8, os.cpu_count() or 1))


def to_jsonable(obj):
    """Convert numpy scalars and arrays into plain json values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dump_json(path, obj):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json_dumps(to_jsonable(obj)) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write '{path}': {exc}") from exc


def load_json(path):
    path = Path(path)
    try:
        return json_loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read '{path}': {exc}") from exc


def write_jsonl(path, records: Iterable[Any]):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fp:
            for rec in records:
                fp.write(json_dumps(to_jsonable(rec)))
                fp.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write '{path}': {exc}") from exc


def read_jsonl(path) -> List[Any]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read '{path}': {exc}") from exc
    return [json_loads(line) for line in lines if line.strip()]


def write_raw_image(path, data: np.ndarray):
    """Row-major, channel-interleaved little-endian float32."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(data, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write '{path}': {exc}") from exc


def read_raw_image(path, shape: Tuple[int, ...]) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read '{path}': {exc}") from exc

    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise IoError(
            f"'{path}' holds {len(raw)} bytes, expected {expected} for shape {shape}")

    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def to_uint8(data: np.ndarray) -> np.ndarray:
    # half-up rounding, not numpy's round-half-even
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_ppm(path, data: np.ndarray):
    """Write a P6 PPM; single-channel images are replicated to gray RGB."""
    pixels = to_uint8(data)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels, mode="RGB").save(path, format="PPM")
    except OSError as exc:
        raise IoError(f"cannot write '{path}': {exc}") from exc
