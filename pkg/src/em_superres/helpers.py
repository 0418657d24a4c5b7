from typing import Any, Iterable, Union
from pathlib import Path
from em_superres.exceptions import MalformedHeaderError, PayloadLengthError
import numpy as np
import hashlib
import logging
import json

logger = logging.getLogger("em_superres_helpers")

PathLike = Union[str, Path]


def sidecar_paths(path: PathLike) -> tuple[Path, Path]:
    """
    Return the (json, raw) pair for an artifact path.

    The path may name either file of the pair or the common stem, e.g. ``out/truth``, ``out/truth.json`` and
    ``out/truth.raw`` all resolve to the same pair.
    """

    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(f"{path.name}.json"), path.with_name(f"{path.name}.raw")


def read_header(path: PathLike, *, format_: str, required: Iterable[str]) -> dict[str, Any]:
    """
    Read and check a JSON sidecar.

    Args:
        path: Path of the sidecar
        format_: Expected value of the "format" key
        required: Keys that must be present
    """

    try:
        header = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"Cannot read header {path}: {exc}") from exc

    if not isinstance(header, dict):
        raise MalformedHeaderError(f"Header {path} is not a JSON object")

    if header.get("format") != format_:
        raise MalformedHeaderError(f"Header {path} has format {header.get('format')!r}, expected {format_!r}")

    missing = [key for key in required if key not in header]
    if missing:
        raise MalformedHeaderError(f"Header {path} is missing keys {missing}")

    return header


def write_json(path: PathLike, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=4, sort_keys=True))
    return path


def read_raw(path: PathLike, *, dtype: str, count: int) -> np.ndarray:
    """
    Read exactly ``count`` little-endian values from a raw payload.
    """

    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise PayloadLengthError(f"Cannot read payload {path}: {exc}") from exc

    itemsize = np.dtype(dtype).itemsize
    if len(payload) != count * itemsize:
        raise PayloadLengthError(
            f"Payload {path} holds {len(payload) // itemsize} values ({len(payload)} bytes), expected {count}"
        )

    return np.frombuffer(payload, dtype=dtype).copy()


def write_raw(path: PathLike, values: np.ndarray, *, dtype: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype=dtype).tobytes(order="C"))
    return path


def hash_array(array: np.ndarray) -> str:
    """
    sha256 of the array bytes, shape and dtype.
    """

    digest = hashlib.sha256()
    digest.update(str(array.shape).encode())
    digest.update(str(array.dtype).encode())
    digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def hash_file(path: PathLike, *, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        while chunk := handle.read(chunk_size):
            digest.update(chunk)
    return digest.hexdigest()


def hash_artifact(path: PathLike) -> dict[str, str]:
    """
    Hash every file of an artifact. Sidecar pairs hash both halves, directories hash their files.
    """

    path = Path(path)
    if path.is_dir():
        return {str(file.relative_to(path)): hash_file(file) for file in sorted(path.rglob("*")) if file.is_file()}

    json_path, raw_path = sidecar_paths(path)
    if json_path.exists() and raw_path.exists():
        return {json_path.name: hash_file(json_path), raw_path.name: hash_file(raw_path)}

    return {path.name: hash_file(path)}


def lattice(dim: int, extent: int, stride: int) -> np.ndarray:
    """
    Origins 0, s, 2s, ... along one axis, with a final origin flush with the far boundary.

    Args:
        dim: Axis length
        extent: Patch extent along the axis
        stride: Step between origins
    """

    positions = list(range(0, dim - extent + 1, stride))
    if positions[-1] != dim - extent:
        positions.append(dim - extent)
    return np.asarray(positions, dtype=np.int64)


def chunked(count: int, size: int, start: int = 0) -> Iterable[slice]:
    for begin in range(start, count, size):
        yield slice(begin, min(begin + size, count))


def write_bitmask(path: PathLike, mask: np.ndarray) -> Path:
    """
    Write a boolean array as a packed 1-bit bitmap, row-major, most significant bit first.
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes())
    return path


def read_bitmask(path: PathLike, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    packed = read_raw(path, dtype="u1", count=(count + 7) // 8)
    return np.unpackbits(packed, count=count).astype(bool).reshape(shape)
