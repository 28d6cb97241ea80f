"""Binary tensor archive and network checkpoints.

Layout::

    b"IRNCKPT1"
    uint64 little-endian header length
    UTF-8 JSON header: {"version", ..., "tensors": [{name, shape, dtype, offset, length, crc32}]}
    raw tensor payloads, little-endian, in directory order

Offsets are relative to the first payload byte. Checkpoints store ``f32``
tensors only; the preprocessed image cache also uses ``u8``.
"""
from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .dataset import LABEL_MAP
from .errors import CorruptFile, ShapeMismatch, VersionMismatch
from .model import NetworkConfig, NetworkGraph, build_network, init_tensor

MAGIC = b"IRNCKPT1"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
VELOCITY_PREFIX = "velocity:"


def write_archive(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomically write ``tensors`` (in dict order) under ``header``."""
    path = Path(path)
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            tag = "u8"
        else:
            tag = "f32"
            arr = arr.astype("<f4", copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": tag,
                "offset": offset,
                "length": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps({"version": FORMAT_VERSION, **header, "tensors": directory}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_archive(path: str | Path, mmap: bool = False) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an archive back. With ``mmap`` the payloads are memory-mapped and not checksummed."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CorruptFile(f"{path}: bad magic bytes")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CorruptFile(f"{path}: truncated header length")
        (head_len,) = struct.unpack("<Q", raw_len)
        if head_len > size:
            raise CorruptFile(f"{path}: header length {head_len} exceeds file size")
        try:
            header = json.loads(fh.read(head_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFile(f"{path}: unreadable header ({exc})") from exc
        if header.get("version") != FORMAT_VERSION:
            raise VersionMismatch(f"{path}: format version {header.get('version')}, expected {FORMAT_VERSION}")
        base = len(MAGIC) + 8 + head_len
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise CorruptFile(f"{path}: unknown dtype {entry['dtype']!r}")
            shape = tuple(entry["shape"])
            if entry["length"] != math.prod(shape) * dtype.itemsize:
                raise CorruptFile(f"{path}: byte length of {entry['name']} does not match its shape")
            if base + entry["offset"] + entry["length"] > size:
                raise CorruptFile(f"{path}: payload of {entry['name']} is truncated")
            if mmap:
                tensors[entry["name"]] = np.memmap(
                    path, dtype=dtype, mode="r", offset=base + entry["offset"], shape=shape
                )
                continue
            fh.seek(base + entry["offset"])
            blob = fh.read(entry["length"])
            if zlib.crc32(blob) != entry["crc32"]:
                raise CorruptFile(f"{path}: checksum mismatch for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return header, tensors


@dataclass
class Checkpoint:
    version: int
    label_map: dict[str, int]
    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    trainable_units: Optional[list[str]] = None


def save_checkpoint(
    graph: NetworkGraph,
    path: str | Path,
    meta: Optional[dict] = None,
    velocity: Optional[dict[str, torch.Tensor]] = None,
) -> Path:
    tensors = {n: t.detach().cpu().numpy() for n, t in graph.state_tensors().items()}
    for n, v in (velocity or {}).items():
        tensors[VELOCITY_PREFIX + n] = v.detach().cpu().numpy()
    header = {
        "config": graph.config.to_dict(),
        "label_map": LABEL_MAP,
        "meta": meta or {},
        "trainable_units": sorted(graph.trainable_units),
    }
    write_archive(path, header, tensors)
    return Path(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, tensors = read_archive(path)
    try:
        config = NetworkConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: invalid network config ({exc})") from exc
    velocity = {n[len(VELOCITY_PREFIX):]: t for n, t in tensors.items() if n.startswith(VELOCITY_PREFIX)}
    params = {n: t for n, t in tensors.items() if not n.startswith(VELOCITY_PREFIX)}
    return Checkpoint(
        version=header["version"],
        label_map=header.get("label_map", {}),
        config=config,
        tensors=params,
        velocity=velocity,
        meta=header.get("meta", {}),
        trainable_units=header.get("trainable_units"),
    )


def load_into(graph: NetworkGraph, ckpt: Checkpoint, strict: bool = True) -> dict[str, list[str]]:
    """Copy checkpoint tensors into ``graph``.

    With ``strict`` every graph tensor must be present with the same shape.
    Otherwise missing or mis-shaped tensors are freshly initialized and
    reported. Returns ``{"loaded": [...], "initialized": [...]}``.
    """
    param_shapes = graph.param_shapes()
    expected = {**param_shapes, **graph.buffer_shapes()}
    seed = graph.config.seed if graph.config else 0
    loaded, initialized = [], []
    new_params, new_buffers = {}, {}
    for name, shape in expected.items():
        arr = ckpt.tensors.get(name)
        if arr is not None and tuple(arr.shape) == tuple(shape):
            value = torch.from_numpy(np.array(arr, dtype=np.float32))
            loaded.append(name)
        elif strict:
            if arr is None:
                raise ShapeMismatch(name, shape, ())
            raise ShapeMismatch(name, shape, arr.shape)
        else:
            value = init_tensor(name, shape, seed)
            initialized.append(name)
        (new_params if name in param_shapes else new_buffers)[name] = value
    graph.params, graph.buffers = new_params, new_buffers
    return {"loaded": loaded, "initialized": initialized}


def graph_from_checkpoint(ckpt: Checkpoint) -> NetworkGraph:
    graph = build_network(ckpt.config)
    load_into(graph, ckpt, strict=True)
    if ckpt.trainable_units is not None:
        graph.trainable_units = set(ckpt.trainable_units)
    return graph
