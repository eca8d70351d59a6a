"""EPDS v1 binary format: writer and a standalone reader.

Layout (little-endian): magic ``EPDS``, u32 version (1), u32 N,
u32 input_dim, N*input_dim f32 features row-major, N u32 class labels,
N u32 task ids. A JSON manifest (``<stem>.manifest.json`` next to the
data file) maps task ids to train/val/test splits and carries the
feature payload checksum.

This module is deliberately independent of the training package so the
``verify`` command re-validates files without sharing any parsing code.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EPDS"
VERSION = 1
SPLITS = ("train", "val", "test")


class FormatError(Exception):
    pass


def manifest_path_for(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".manifest.json")


def feature_sha256(features: np.ndarray) -> str:
    return hashlib.sha256(
        np.ascontiguousarray(features, dtype="<f4").tobytes(order="C")).hexdigest()


def write(data_path, features: np.ndarray, class_labels: np.ndarray,
          task_ids: np.ndarray, split_by_task: dict[int, str],
          extra_manifest: dict | None = None) -> dict:
    features = np.ascontiguousarray(features, dtype="<f4")
    n, dim = features.shape
    class_labels = np.asarray(class_labels)
    task_ids = np.asarray(task_ids)
    if len(class_labels) != n or len(task_ids) != n:
        raise FormatError("labels/task ids length mismatch")
    if np.any(class_labels < 0) or np.any(task_ids < 0):
        raise FormatError("labels and task ids must be non-negative")

    with open(data_path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, n, dim))
        fh.write(features.tobytes(order="C"))
        fh.write(class_labels.astype("<u4").tobytes())
        fh.write(task_ids.astype("<u4").tobytes())

    splits: dict[str, list[int]] = {s: [] for s in SPLITS}
    for task, split in sorted(split_by_task.items()):
        if split not in SPLITS:
            raise FormatError(f"unknown split {split!r} for task {task}")
        splits[split].append(int(task))
    manifest = {
        "format": "EPDS-manifest",
        "version": 1,
        "splits": splits,
        "feature_sha256": feature_sha256(features),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    manifest_path_for(data_path).write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read(data_path, manifest_path=None):
    """Parse an EPDS file strictly; returns (features f32, labels, tasks,
    manifest dict). Raises FormatError on any structural problem."""
    data_path = Path(data_path)
    if not data_path.exists():
        raise FormatError(f"file not found: {data_path}")
    blob = data_path.read_bytes()
    if len(blob) < 16:
        raise FormatError(f"{data_path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{data_path}: bad magic {blob[:4]!r}")
    version, n, dim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"{data_path}: unsupported version {version}")
    expect = 16 + n * dim * 4 + 8 * n
    if len(blob) != expect:
        raise FormatError(
            f"{data_path}: file is {len(blob)} bytes, expected {expect} "
            f"for N={n}, input_dim={dim}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=16).reshape(n, dim)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=16 + 4 * n * dim)
    tasks = np.frombuffer(blob, dtype="<u4", count=n, offset=16 + 4 * n * dim + 4 * n)

    mpath = Path(manifest_path) if manifest_path else manifest_path_for(data_path)
    if not mpath.exists():
        raise FormatError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as err:
        raise FormatError(f"{mpath}: invalid JSON: {err}") from err
    if manifest.get("format") != "EPDS-manifest":
        raise FormatError(f"{mpath}: not an EPDS manifest")
    return feats, labels.astype(np.int64), tasks.astype(np.int64), manifest
