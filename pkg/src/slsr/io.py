"""On-disk formats: checkpoint container, embedding matrices, assignments CSV."""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

CKPT_MAGIC = b"SLSRCKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def write_checkpoint(path, meta: dict, segments: dict[str, np.ndarray]) -> None:
    """Layout (little-endian)::

        magic[8] version:u32 meta_len:u64 meta_json
        n_segments:u32
        per segment: name_len:u32 name ndim:u32 shape:u64*ndim data:f32*prod(shape)
    """
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(segments)))
        for name, arr in segments.items():
            arr = np.asarray(arr)
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, meta_len = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    meta = json.loads(data[off:off + meta_len])
    off += meta_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    segments = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        segments[name] = arr.copy()
    return meta, segments


def state_to_segments(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_segments(module: torch.nn.Module, segments: dict[str, np.ndarray], prefix: str = "") -> None:
    current = module.state_dict()
    new = {}
    for k, v in current.items():
        key = prefix + k
        if key not in segments:
            raise FormatError(f"checkpoint missing segment {key}")
        new[k] = torch.from_numpy(segments[key]).to(v.dtype).reshape(v.shape)
    module.load_state_dict(new)


def write_embedding(path, values: np.ndarray, row_ids: Sequence[str] = ()) -> None:
    """Header ``rows:u64 cols:u64`` then row-major float32; row ids go to ``<path>.ids.json``."""
    values = np.asarray(values)
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", *values.shape))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    if row_ids:
        Path(str(path) + ".ids.json").write_text(json.dumps(list(row_ids)))


def read_embedding(path) -> tuple[np.ndarray, list[str]]:
    data = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<QQ", data, 0)
    values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=16).reshape(rows, cols).astype(np.float64)
    ids_path = Path(str(path) + ".ids.json")
    ids = json.loads(ids_path.read_text()) if ids_path.exists() else [str(i) for i in range(rows)]
    return values, ids


def write_assignments(path, image_ids: Sequence[str], identities: Sequence[int], clusters: Sequence[int]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "identity", "cluster"])
        for row in zip(image_ids, identities, clusters):
            w.writerow([row[0], int(row[1]), int(row[2])])


def read_assignments(path) -> list[tuple[str, int, int]]:
    with open(path, newline="") as f:
        return [(r["image_id"], int(r["identity"]), int(r["cluster"])) for r in csv.DictReader(f)]


class CsvLog:
    """Append-only CSV training log."""

    def __init__(self, path, fields: Sequence[str]):
        self.path = Path(path)
        self.fields = list(fields)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(self.fields)

    def write(self, **row) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([_fmt(row.get(k, "")) for k in self.fields])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v
