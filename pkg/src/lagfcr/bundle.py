"""Self-describing array bundles with a versioned JSON header.

Layout: a zip archive (stored, fixed timestamps so identical content gives
identical bytes) holding ``header.json`` plus one ``.npy`` member per array.
The header carries ``format`` and ``version`` keys that readers check.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from lagfcr.errors import CheckpointError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_bundle(path, header: dict, arrays: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("header.json"), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name], order="C"), allow_pickle=False)
            zf.writestr(_member(name + ".npy"), buf.getvalue())
    tmp.replace(path)


def read_bundle(path, fmt: str, version: int):
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: cannot open bundle ({exc})") from None
    with zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError:
            raise CheckpointError(f"{path}: missing header") from None
        if header.get("format") != fmt:
            raise CheckpointError(f"{path}: expected format {fmt!r}, found {header.get('format')!r}")
        if header.get("version") != version:
            raise CheckpointError(
                f"{path}: incompatible {fmt} version {header.get('version')} (this build reads {version})"
            )
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return header, arrays
