"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VLAB"                     magic
    uint32   version            currently 1
    uint32   header_len
    bytes    header             UTF-8 JSON: config_digest, step, rng, tags, metadata
    uint32   n_tensors
    n_tensors records:
        uint16  name_len
        bytes   name            UTF-8
        uint8   dtype code      see DTYPES
        uint8   ndim
        uint32  dims[ndim]
        bytes   data            raw little-endian, C order
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError

MAGIC = b"VLAB"
VERSION = 1
DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<i4", 4: "|u1"}
_CODES = {np.dtype(v): k for k, v in DTYPES.items()}


@dataclass
class Checkpoint:
    tensors: dict
    config_digest: str = ""
    step: int = 0
    rng: dict = field(default_factory=dict)
    tags: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def header(self):
        return {"config_digest": self.config_digest, "step": self.step, "rng": self.rng,
                "tags": list(self.tags), "metadata": self.metadata}


def dumps(ckpt):
    parts = [MAGIC, struct.pack("<I", VERSION)]
    head = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(head)), head, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _CODES:
            raise ContractError(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
        code = _CODES[np.dtype(dt)]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise ContractError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    head = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = np.dtype(DTYPES[code])
        n = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(buf[pos:pos + n], dtype=dt).reshape(shape).copy()
        pos += n
    if pos != len(buf):
        raise ContractError("trailing bytes after last tensor record")
    return Checkpoint(tensors, head["config_digest"], head["step"], head["rng"], head["tags"],
                      head["metadata"])


def save(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)
    return path


def load(path):
    path = Path(path)
    if not path.exists():
        raise ContractError(f"missing checkpoint {path}")
    return loads(path.read_bytes())


def prefixed(state, prefix):
    return {prefix + k: v for k, v in state.items()}


def strip(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
