"""
Versioned checkpoint container.

A checkpoint is a numpy `.npz` archive. The `__meta__` entry holds UTF-8 JSON
(format version, config echo, counters, rng states); every other entry is a
named float array. Arrays are stored unchanged, so a save/load round trip is
bit-exact.
"""

import json
import logging
import os
import zipfile
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple, Union

import numpy as np

from errors import CheckpointError


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"


def write_checkpoint(path: Union[str, Path], meta: Dict[str, Any], arrays: Dict[str, np.ndarray]):
    """
    Write meta and arrays to `path`, replacing any existing file.

    The archive is written next to the target and renamed into place so an
    interrupted write never leaves a truncated checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if META_KEY in arrays:
        raise ValueError(f"Array name '{META_KEY}' is reserved")
    meta = dict(meta, format_version=FORMAT_VERSION)
    payload = {META_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    payload.update({name: np.asarray(value) for name, value in arrays.items()})

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        np.savez(handle, **payload)
    os.replace(tmp, path)
    logger.debug(f"Wrote checkpoint {path} ({len(arrays)} arrays)")


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    Read a checkpoint written by write_checkpoint.

    Returns:
        tuple: (meta dict, arrays dict).

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointError: If the file is not a checkpoint or has another format version.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path} is not a readable checkpoint: {e}") from e
    if META_KEY not in arrays:
        raise CheckpointError(f"{path} has no '{META_KEY}' entry")
    try:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: metadata is not valid JSON") from e
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    return meta, arrays


def require_arrays(arrays: Dict[str, np.ndarray], names: Iterable[str], where: str = "checkpoint"):
    """Raise CheckpointError naming the first missing array."""
    for name in names:
        if name not in arrays:
            raise CheckpointError(f"{where} is missing array '{name}'")


def rng_state(generator: np.random.Generator) -> Dict[str, Any]:
    """JSON-serializable bit-generator state."""
    return generator.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    """Generator continuing exactly where the saved one stopped."""
    name = state.get("bit_generator")
    if name != "PCG64":
        raise CheckpointError(f"Unsupported bit generator '{name}'")
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)
