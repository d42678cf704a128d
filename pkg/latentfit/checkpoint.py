"""
Versioned checkpoint container.

A checkpoint is a zip archive of ``.npy`` members, readable with ``numpy.load``.
The ``__header__`` member holds a YAML document with the format name, version,
member kinds and any metadata the caller attaches (layer shapes, configuration
snapshot). Members are written in sorted order with a fixed timestamp, so
identical contents give identical files.
"""
from __future__ import annotations

import io
import os
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from latentfit.errors import LatentfitError, MissingInputError

FORMAT = "latentfit-checkpoint"
VERSION = 1
HEADER_KEY = "__header__"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(LatentfitError):
    pass


def save_checkpoint(
    path: str | os.PathLike, arrays: dict[str, np.ndarray], kind: str, meta: dict[str, Any] | None = None
) -> Path:
    path = Path(path)
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta or {}}
    header_bytes = yaml.safe_dump(header, sort_keys=True).encode("utf-8")

    members = {HEADER_KEY: np.frombuffer(header_bytes, dtype=np.uint8)}
    for key, value in arrays.items():
        if key == HEADER_KEY:
            raise CheckpointError(f"{HEADER_KEY} is reserved.")
        members[key] = np.asarray(value)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as archive:
        for key in sorted(members):
            buffer = io.BytesIO()
            np.lib.format.write_array(buffer, members[key], allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            archive.writestr(info, buffer.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(
    path: str | os.PathLike, kind: str | None = None
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"Checkpoint {path} does not exist.")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as err:
        raise CheckpointError(f"{path} is not a readable checkpoint: {err}") from err

    if HEADER_KEY not in arrays:
        raise CheckpointError(f"{path} has no checkpoint header.")
    header = yaml.safe_load(arrays.pop(HEADER_KEY).tobytes().decode("utf-8"))
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file.")
    if header.get("version") != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {header.get('version')}.")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, expected {kind!r}.")
    return arrays, header["meta"]


def sub_arrays(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {key[len(prefix) :]: value for key, value in arrays.items() if key.startswith(prefix)}


def prefixed(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {prefix + key: value for key, value in arrays.items()}
