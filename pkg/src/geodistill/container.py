"""Single-file checkpoint container.

Layout: an 8-byte little-endian unsigned length prefix, a UTF-8 JSON header of
that length, then raw tensor blobs. The header carries a mandatory ``version``
field, arbitrary ``meta`` (config snapshots etc.), and a ``tensors`` directory
mapping name -> {dtype, shape, offset} with offsets relative to the end of the
header. Blobs are little-endian 32-bit floats, row-major.
"""

import json
import struct

import numpy as np
import torch

from .errors import CorruptContainerError, VersionMismatchError

CONTAINER_VERSION = 1
_LEN_FMT = "<Q"
_LEN_SIZE = struct.calcsize(_LEN_FMT)


def save_tensors(path, tensors, meta=None):
    """Write named float tensors plus a metadata dict to ``path``.

    Tensors are stored as float32 regardless of input dtype; insertion order
    is preserved in the directory.
    """
    directory = {}
    blobs = []
    offset = 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(
            tensor.detach().cpu().numpy(), dtype="<f4"
        )
        directory[name] = {
            "dtype": "f4",
            "shape": list(arr.shape),
            "offset": offset,
        }
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CONTAINER_VERSION,
        "meta": meta or {},
        "tensors": directory,
    }
    payload = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_LEN_FMT, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    """Read a container back as ``(tensors, meta)`` with float32 tensors."""
    try:
        with open(path, "rb") as fh:
            raw_len = fh.read(_LEN_SIZE)
            if len(raw_len) != _LEN_SIZE:
                raise CorruptContainerError(f"{path}: missing length prefix")
            (header_len,) = struct.unpack(_LEN_FMT, raw_len)
            payload = fh.read(header_len)
            if len(payload) != header_len:
                raise CorruptContainerError(f"{path}: truncated header")
            try:
                header = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CorruptContainerError(f"{path}: bad header: {exc}") from exc
            if not isinstance(header, dict) or "version" not in header:
                raise CorruptContainerError(f"{path}: header lacks version field")
            if header["version"] != CONTAINER_VERSION:
                raise VersionMismatchError(
                    f"{path}: container version {header['version']}, "
                    f"supported {CONTAINER_VERSION}"
                )
            body = fh.read()
    except OSError as exc:
        raise CorruptContainerError(f"{path}: {exc}") from exc

    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(body):
            raise CorruptContainerError(f"{path}: blob for {name!r} truncated")
        arr = np.frombuffer(body[start:end], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, header.get("meta", {})
