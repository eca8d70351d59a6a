"""Task-partitioned dataset model and the episodic sampler.

A dataset is a flat feature matrix whose rows carry a class label and a
task id; class label sets are disjoint across tasks. Episodes are drawn
from one task: a labeled support set, in-distribution queries from the
same task (disjoint from the support), and out-of-distribution queries
pooled from the other tasks of the same split (or from a single foreign
class, matching the evaluation protocol).

On-disk format "EPDS v1" (little-endian):

    magic   4 bytes  b"EPDS"
    u32     version (1)
    u32     N
    u32     input_dim
    f32[N*input_dim]  features, row-major
    u32[N]  class labels
    u32[N]  task ids

plus a sidecar JSON manifest (``<stem>.manifest.json`` next to the data
file by default) mapping task ids to train/val/test splits.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"EPDS"
_VERSION = 1

SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    pass


class SamplingError(Exception):
    pass


@dataclass
class TaskDataset:
    features: np.ndarray          # (N, input_dim) float64
    class_labels: np.ndarray      # (N,) int64, disjoint across tasks
    task_ids: np.ndarray          # (N,) int64
    split_by_task: dict[int, str]

    # index caches, built on validate()
    _rows_by_class: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _classes_by_task: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        self.validate()

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise DatasetError("features must be 2-D")
        if len(self.class_labels) != n or len(self.task_ids) != n:
            raise DatasetError("labels/task ids length mismatch")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError("non-finite feature values")

        class_task: dict[int, int] = {}
        for cls, task in zip(self.class_labels.tolist(), self.task_ids.tolist()):
            seen = class_task.get(cls)
            if seen is None:
                class_task[cls] = task
            elif seen != task:
                raise DatasetError(
                    f"class {cls} appears in tasks {seen} and {task}; "
                    "class sets must be disjoint across tasks")

        tasks = set(self.task_ids.tolist())
        missing = tasks - set(self.split_by_task)
        if missing:
            raise DatasetError(f"tasks without a split assignment: {sorted(missing)}")
        bad = {t: s for t, s in self.split_by_task.items() if s not in SPLITS}
        if bad:
            raise DatasetError(f"unknown split names: {bad}")

        self._rows_by_class = {}
        self._classes_by_task = {}
        order = np.argsort(self.class_labels, kind="stable")
        sorted_labels = self.class_labels[order]
        for cls in np.unique(self.class_labels):
            lo, hi = np.searchsorted(sorted_labels, [cls, cls + 1])
            self._rows_by_class[int(cls)] = order[lo:hi]
        for cls, task in class_task.items():
            self._classes_by_task.setdefault(task, []).append(cls)
        for task, classes in self._classes_by_task.items():
            classes.sort()
            if len(classes) < 2:
                raise DatasetError(f"task {task} has {len(classes)} class(es); need >= 2")

    def tasks_in_split(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return sorted(t for t in self._classes_by_task if self.split_by_task[t] == split)

    def classes_of_task(self, task: int) -> list[int]:
        return self._classes_by_task[task]

    def rows_of_class(self, cls: int) -> np.ndarray:
        return self._rows_by_class[cls]


@dataclass(frozen=True)
class EpisodeSpec:
    """How to draw one episode: K-way support plus ID/OoD query sets."""

    n_way: int = 5
    support_per_class: int = 5
    id_query_per_class: int = 5
    ood_query_total: int = 25
    ood_mode: str = "pooled"  # "pooled" draws from all other tasks, "single_class" from one

    def __post_init__(self):
        if self.n_way < 1 or self.support_per_class < 1:
            raise ValueError("n_way and support_per_class must be >= 1")
        if self.id_query_per_class < 1 or self.ood_query_total < 1:
            raise ValueError("query sizes must be >= 1")
        if self.ood_mode not in ("pooled", "single_class"):
            raise ValueError(f"unknown ood_mode {self.ood_mode!r}")


@dataclass
class Episode:
    support_x: np.ndarray      # (N_S, input_dim)
    support_y: np.ndarray      # (N_S,) class indices 0..K-1
    query_id_x: np.ndarray     # (N_I, input_dim)
    query_id_y: np.ndarray     # (N_I,) class indices 0..K-1
    query_ood_x: np.ndarray    # (N_O, input_dim)
    n_way: int
    task_id: int
    class_ids: np.ndarray      # global class id per episode index
    support_rows: np.ndarray   # dataset row numbers, for audit
    query_id_rows: np.ndarray
    query_ood_rows: np.ndarray


def _eligible_classes(data: TaskDataset, task: int, spec: EpisodeSpec) -> list[int]:
    need = spec.support_per_class + spec.id_query_per_class
    return [c for c in data.classes_of_task(task) if len(data.rows_of_class(c)) >= need]


def sample_episode(data: TaskDataset, spec: EpisodeSpec,
                   rng: np.random.Generator, split: str = "train") -> Episode:
    """Draw one episode from ``split``; deterministic given the rng state."""
    tasks = data.tasks_in_split(split)
    if len(tasks) < 2:
        raise SamplingError(
            f"split {split!r} has {len(tasks)} task(s); need >= 2 so OoD queries "
            "can come from a different task")

    eligible = [t for t in tasks if len(_eligible_classes(data, t, spec)) >= spec.n_way]
    if not eligible:
        raise SamplingError(
            f"no task in split {split!r} has {spec.n_way} classes with "
            f"{spec.support_per_class}+{spec.id_query_per_class} instances each")

    task = int(rng.choice(np.asarray(eligible)))
    classes = rng.choice(np.asarray(_eligible_classes(data, task, spec)),
                         size=spec.n_way, replace=False)

    sup_rows, sup_y, qid_rows, qid_y = [], [], [], []
    for k, cls in enumerate(classes.tolist()):
        rows = data.rows_of_class(cls)
        picked = rng.permutation(rows)
        sup_rows.append(picked[:spec.support_per_class])
        qid_rows.append(picked[spec.support_per_class:
                               spec.support_per_class + spec.id_query_per_class])
        sup_y.extend([k] * spec.support_per_class)
        qid_y.extend([k] * spec.id_query_per_class)
    sup_rows = np.concatenate(sup_rows)
    qid_rows = np.concatenate(qid_rows)

    other_tasks = [t for t in tasks if t != task]
    if spec.ood_mode == "pooled":
        pool = np.concatenate([
            data.rows_of_class(c) for t in other_tasks for c in data.classes_of_task(t)])
        if len(pool) < spec.ood_query_total:
            raise SamplingError(
                f"other tasks hold {len(pool)} instances < ood_query_total "
                f"{spec.ood_query_total}")
        ood_rows = rng.choice(pool, size=spec.ood_query_total, replace=False)
    else:
        candidates = [c for t in other_tasks for c in data.classes_of_task(t)
                      if len(data.rows_of_class(c)) >= spec.ood_query_total]
        if not candidates:
            raise SamplingError(
                f"no foreign class with >= {spec.ood_query_total} instances for "
                "single_class OoD sampling")
        cls = int(rng.choice(np.asarray(candidates)))
        ood_rows = rng.choice(data.rows_of_class(cls), size=spec.ood_query_total,
                              replace=False)

    return Episode(
        support_x=data.features[sup_rows],
        support_y=np.asarray(sup_y, dtype=np.int64),
        query_id_x=data.features[qid_rows],
        query_id_y=np.asarray(qid_y, dtype=np.int64),
        query_ood_x=data.features[ood_rows],
        n_way=spec.n_way,
        task_id=task,
        class_ids=np.asarray(classes, dtype=np.int64),
        support_rows=sup_rows,
        query_id_rows=qid_rows,
        query_ood_rows=np.asarray(ood_rows, dtype=np.int64),
    )


def fixed_eval_episodes(data: TaskDataset, spec: EpisodeSpec, n_episodes: int,
                        seed: int, split: str) -> list[Episode]:
    """Reproducible episode list for validation/test; one rng seeds them all."""
    rng = np.random.default_rng(seed)
    return [sample_episode(data, spec, rng, split=split) for _ in range(n_episodes)]


# ---------------------------------------------------------------------------
# EPDS v1 io


def default_manifest_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".manifest.json")


def feature_checksum(features: np.ndarray) -> str:
    """SHA-256 over the on-disk f32 little-endian feature payload."""
    return hashlib.sha256(
        np.ascontiguousarray(features, dtype="<f4").tobytes(order="C")).hexdigest()


def save_epds(data_path, features: np.ndarray, class_labels: np.ndarray,
              task_ids: np.ndarray, split_by_task: dict[int, str],
              manifest_path=None, extra_manifest: dict | None = None) -> dict:
    """Write an EPDS v1 file plus its JSON manifest; returns the manifest."""
    features = np.ascontiguousarray(features, dtype="<f4")
    n, dim = features.shape
    class_labels = np.asarray(class_labels)
    task_ids = np.asarray(task_ids)
    if np.any(class_labels < 0) or np.any(task_ids < 0):
        raise DatasetError("EPDS labels and task ids must be non-negative")
    with open(data_path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _VERSION, n, dim))
        fh.write(features.tobytes(order="C"))
        fh.write(class_labels.astype("<u4").tobytes())
        fh.write(task_ids.astype("<u4").tobytes())

    splits: dict[str, list[int]] = {s: [] for s in SPLITS}
    for task, split in sorted(split_by_task.items()):
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r} for task {task}")
        splits[split].append(int(task))
    manifest = {
        "format": "EPDS-manifest",
        "version": 1,
        "splits": splits,
        "feature_sha256": feature_checksum(features),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    mpath = Path(manifest_path) if manifest_path else default_manifest_path(data_path)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_epds(data_path, manifest_path=None) -> TaskDataset:
    data_path = Path(data_path)
    if not data_path.exists():
        raise DatasetError(f"dataset file not found: {data_path}")
    blob = data_path.read_bytes()
    if blob[:4] != _MAGIC:
        raise DatasetError(f"{data_path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise DatasetError(f"{data_path}: truncated header")
    version, n, dim = struct.unpack_from("<III", blob, 4)
    if version != _VERSION:
        raise DatasetError(f"{data_path}: unsupported EPDS version {version}")
    expect = 16 + n * dim * 4 + n * 4 + n * 4
    if len(blob) != expect:
        raise DatasetError(
            f"{data_path}: size {len(blob)} != expected {expect} for N={n}, dim={dim}")
    off = 16
    feats = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    off += n * dim * 4
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off)
    off += n * 4
    tasks = np.frombuffer(blob, dtype="<u4", count=n, offset=off)

    mpath = Path(manifest_path) if manifest_path else default_manifest_path(data_path)
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "EPDS-manifest":
        raise DatasetError(f"{mpath}: not an EPDS manifest")
    split_by_task: dict[int, str] = {}
    for split, ts in manifest["splits"].items():
        for t in ts:
            if t in split_by_task:
                raise DatasetError(f"task {t} assigned to two splits")
            split_by_task[int(t)] = split

    return TaskDataset(
        features=feats.astype(np.float64),
        class_labels=labels.astype(np.int64),
        task_ids=tasks.astype(np.int64),
        split_by_task=split_by_task,
    )
