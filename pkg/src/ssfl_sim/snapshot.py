#!/usr/bin/env python3
#
# Copyright (c) 2025 SnapFS, LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.


"""
Flat binary format for named float64 arrays.

    header:  magic (8 bytes) | version (u16) | entry count (u32)
    entry:   name length (u16) | utf-8 name | rank (u8) | dims (u32 * rank)
             | little-endian float64 data

Used for parameter checkpoints, prototype-bank snapshots and for measuring
payload sizes.
"""

import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import SnapshotError

MAGIC = b"SSFLSNAP"
VERSION = 1

_HEADER = struct.Struct("<8sHI")


def encode_snapshot(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(arrays))]
    for name, value in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_snapshot(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < _HEADER.size:
        raise SnapshotError("snapshot truncated before header end")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotError(f"bad snapshot magic {magic!r}")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")

    out: Dict[str, np.ndarray] = {}
    pos = _HEADER.size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            end = pos + 8 * size
            if end > len(data):
                raise SnapshotError(f"entry '{name}' truncated")
            out[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except struct.error as e:
        raise SnapshotError(f"snapshot truncated: {e}") from None
    except UnicodeDecodeError as e:
        raise SnapshotError(f"snapshot entry name is not utf-8: {e.reason} at byte {e.start}") from None
    if pos != len(data):
        raise SnapshotError(f"{len(data) - pos} trailing bytes after last entry")
    return out


def save_snapshot(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_snapshot(arrays)
    path.write_bytes(data)
    return len(data)


def load_snapshot(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_snapshot(Path(path).read_bytes())


def snapshot_size(arrays: Mapping[str, np.ndarray]) -> int:
    return len(encode_snapshot(arrays))
