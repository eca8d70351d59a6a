"""Decode source corpora and emit EPDS v1 datasets.

Three source kinds:

* ``image_tree``: a directory of images, either ``root/class/*.png`` or
  ``root/group/class/*.png``. Images are decoded to grayscale, optionally
  resized, scaled to [0, 1], and flattened.
* ``labeled_csv``: numeric feature columns plus a label column.
* ``bag_of_words``: whitespace triples ``doc word count`` plus a doc-label
  CSV, densified after the configured frequency filters.

Categories are grouped into tasks by an explicit rule (``parent_dir``
uses the first directory level; ``group`` chunks categories), tasks are
split 60/20/20 by category count, and everything about the mapping lands
in the manifest so a conversion is auditable.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import epds

log = logging.getLogger("dataconv")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".pgm"}


class SpecError(Exception):
    pass


class SourceError(Exception):
    pass


@dataclass
class SourceSpec:
    kind: str                       # image_tree | labeled_csv | bag_of_words
    path: str
    resize: tuple[int, int] | None = None      # images: (height, width)
    task_rule: dict = field(default_factory=lambda: {"kind": "group", "size": 5})
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    min_instances_per_class: int = 2
    label_column: str = "label"     # labeled_csv
    labels_path: str | None = None  # bag_of_words
    min_word_docs: int = 1          # bag_of_words: drop rarer words
    min_unique_words: int = 1       # bag_of_words: drop thinner docs
    top_k_words: int | None = None  # bag_of_words: densify to k columns

    @classmethod
    def from_json(cls, path) -> "SourceSpec":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise SpecError(f"cannot read spec {path}: {err}") from err
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        if "resize" in obj and obj["resize"] is not None:
            r = obj["resize"]
            obj["resize"] = (r, r) if isinstance(r, int) else tuple(r)
        if "split_fractions" in obj:
            obj["split_fractions"] = tuple(obj["split_fractions"])
        spec = cls(**obj)
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.kind not in ("image_tree", "labeled_csv", "bag_of_words"):
            raise SpecError(f"unknown source kind {self.kind!r}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise SpecError("split_fractions must sum to 1")
        rule = self.task_rule.get("kind")
        if rule not in ("parent_dir", "group"):
            raise SpecError(f"unknown task_rule kind {rule!r}")
        if rule == "group" and int(self.task_rule.get("size", 0)) < 2:
            raise SpecError("task_rule group size must be >= 2")
        if self.min_instances_per_class < 1:
            raise SpecError("min_instances_per_class must be >= 1")


# ---------------------------------------------------------------------------
# source decoders: produce (features, class_names per row)


def _decode_image(path: Path, resize: tuple[int, int] | None) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if resize is not None:
                img = img.resize((resize[1], resize[0]), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32).reshape(-1) / 255.0
    except OSError as err:
        raise SourceError(f"cannot decode image {path}: {err}") from err


def _load_image_tree(spec: SourceSpec) -> tuple[np.ndarray, list[str], dict[str, str]]:
    """Returns features, per-row class names, and class -> group names."""
    root = Path(spec.path)
    if not root.is_dir():
        raise SourceError(f"image root is not a directory: {root}")
    rows, names = [], []
    class_group: dict[str, str] = {}
    for img_path in sorted(root.rglob("*")):
        if img_path.suffix.lower() not in IMAGE_SUFFIXES or not img_path.is_file():
            continue
        rel = img_path.relative_to(root)
        if len(rel.parts) == 2:          # class/img
            group, cls = rel.parts[0], rel.parts[0]
        elif len(rel.parts) == 3:        # group/class/img
            group, cls = rel.parts[0], f"{rel.parts[0]}/{rel.parts[1]}"
        else:
            raise SourceError(
                f"{img_path}: expected class/img or group/class/img layout")
        rows.append(_decode_image(img_path, spec.resize))
        names.append(cls)
        class_group[cls] = group
    if not rows:
        raise SourceError(f"no images found under {root}")
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise SourceError(
            f"inconsistent image sizes {sorted(dims)}; set 'resize' in the spec")
    return np.stack(rows), names, class_group


def _load_labeled_csv(spec: SourceSpec) -> tuple[np.ndarray, list[str]]:
    path = Path(spec.path)
    if not path.is_file():
        raise SourceError(f"csv not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SourceError(f"{path}: empty file")
        if spec.label_column not in header:
            raise SourceError(f"{path}: no column named {spec.label_column!r}")
        label_i = header.index(spec.label_column)
        feat_cols = [i for i in range(len(header)) if i != label_i]
        rows, names = [], []
        for line_no, rec in enumerate(reader, start=2):
            try:
                rows.append([float(rec[i]) for i in feat_cols])
            except (ValueError, IndexError) as err:
                raise SourceError(f"{path}:{line_no}: bad row: {err}") from err
            names.append(rec[label_i].strip())
    if not rows:
        raise SourceError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float32), names


def _load_bag_of_words(spec: SourceSpec) -> tuple[np.ndarray, list[str]]:
    path = Path(spec.path)
    if not path.is_file():
        raise SourceError(f"triples file not found: {path}")
    if not spec.labels_path:
        raise SourceError("bag_of_words needs labels_path in the spec")
    doc_label: dict[str, str] = {}
    with open(spec.labels_path, newline="") as fh:
        for rec in csv.reader(fh):
            if len(rec) >= 2:
                doc_label[rec[0].strip()] = rec[1].strip()

    counts: dict[str, dict[str, float]] = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise SourceError(f"{path}:{line_no}: expected 'doc word count'")
            doc, word, cnt = parts
            counts.setdefault(doc, {})[word] = counts.get(doc, {}).get(word, 0.0) \
                + float(cnt)

    # drop words below document frequency, then thin documents
    doc_freq: dict[str, int] = {}
    for words in counts.values():
        for w in words:
            doc_freq[w] = doc_freq.get(w, 0) + 1
    kept_words = {w for w, f in doc_freq.items() if f >= spec.min_word_docs}
    if spec.top_k_words is not None:
        ranked = sorted(kept_words, key=lambda w: (-doc_freq[w], w))
        kept_words = set(ranked[: spec.top_k_words])
    vocab = sorted(kept_words)
    if not vocab:
        raise SourceError("no words survive the frequency filters")
    col = {w: i for i, w in enumerate(vocab)}

    rows, names = [], []
    skipped_thin, skipped_unlabeled = 0, 0
    for doc in sorted(counts):
        words = {w: c for w, c in counts[doc].items() if w in kept_words}
        if len(words) < spec.min_unique_words:
            skipped_thin += 1
            continue
        if doc not in doc_label:
            skipped_unlabeled += 1
            continue
        row = np.zeros(len(vocab), dtype=np.float32)
        for w, c in words.items():
            row[col[w]] = c
        rows.append(row)
        names.append(doc_label[doc])
    if skipped_thin:
        log.warning("dropped %d documents below %d unique words",
                    skipped_thin, spec.min_unique_words)
    if skipped_unlabeled:
        log.warning("dropped %d documents without labels", skipped_unlabeled)
    if not rows:
        raise SourceError("no documents survive the filters")
    return np.stack(rows), names


# ---------------------------------------------------------------------------
# category -> task mapping and splits


def _group_classes(class_names: list[str], spec: SourceSpec,
                   class_group: dict[str, str] | None) -> dict[str, str]:
    """class name -> task name."""
    classes = sorted(set(class_names))
    rule = spec.task_rule["kind"]
    if rule == "parent_dir":
        if not class_group:
            raise SpecError("parent_dir task rule needs a grouped image tree")
        return {c: class_group[c] for c in classes}
    size = int(spec.task_rule.get("size", 5))
    mapping = {}
    for i, c in enumerate(classes):
        mapping[c] = f"task{i // size:03d}"
    # a trailing group of one class cannot form a task; merge it backwards
    last = f"task{(len(classes) - 1) // size:03d}"
    if sum(1 for c in classes if mapping[c] == last) < 2 and len(classes) > size:
        prev = f"task{(len(classes) - 1) // size - 1:03d}"
        for c in classes:
            if mapping[c] == last:
                mapping[c] = prev
    return mapping


def _split_tasks(task_classes: dict[str, list[str]], fractions, seed: int
                 ) -> dict[str, str]:
    """task name -> split, targeting the category fractions."""
    rng = np.random.default_rng(seed)
    tasks = sorted(task_classes)
    order = [tasks[i] for i in rng.permutation(len(tasks))]
    total = sum(len(v) for v in task_classes.values())
    split: dict[str, str] = {}
    seen = 0
    for task in order:
        frac = seen / total
        if frac < fractions[0]:
            split[task] = "train"
        elif frac < fractions[0] + fractions[1]:
            split[task] = "val"
        else:
            split[task] = "test"
        seen += len(task_classes[task])
    return split


# ---------------------------------------------------------------------------


def convert(spec: SourceSpec, out_path) -> dict:
    """Run the conversion; writes EPDS + manifest and returns a summary."""
    class_group = None
    if spec.kind == "image_tree":
        features, names, class_group = _load_image_tree(spec)
    elif spec.kind == "labeled_csv":
        features, names = _load_labeled_csv(spec)
    else:
        features, names = _load_bag_of_words(spec)

    # drop classes with too few instances
    tally: dict[str, int] = {}
    for n in names:
        tally[n] = tally.get(n, 0) + 1
    dropped = {c for c, k in tally.items() if k < spec.min_instances_per_class}
    if dropped:
        log.warning("dropping %d class(es) below %d instances: %s",
                    len(dropped), spec.min_instances_per_class,
                    ", ".join(sorted(dropped)[:5]) + ("..." if len(dropped) > 5 else ""))
        keep = [i for i, n in enumerate(names) if n not in dropped]
        features = features[keep]
        names = [names[i] for i in keep]
    if not names:
        raise SourceError("all classes dropped by min_instances_per_class")

    class_task_name = _group_classes(names, spec, class_group)
    task_names = sorted(set(class_task_name.values()))
    task_id = {t: i for i, t in enumerate(task_names)}
    classes = sorted(set(names))
    class_id = {c: i for i, c in enumerate(classes)}

    task_classes: dict[str, list[str]] = {}
    for c, t in class_task_name.items():
        task_classes.setdefault(t, []).append(c)
    thin_tasks = [t for t, cs in task_classes.items() if len(cs) < 2]
    if thin_tasks:
        raise SourceError(
            f"task(s) with fewer than 2 classes: {sorted(thin_tasks)}; "
            "adjust the task rule")

    split_names = _split_tasks(task_classes, spec.split_fractions, spec.split_seed)
    split_by_task = {task_id[t]: split_names[t] for t in task_names}

    labels = np.array([class_id[n] for n in names], dtype=np.int64)
    tasks = np.array([task_id[class_task_name[n]] for n in names], dtype=np.int64)

    categories_per_split = {s: 0 for s in epds.SPLITS}
    for t, cs in task_classes.items():
        categories_per_split[split_names[t]] += len(cs)

    manifest = epds.write(
        out_path, features, labels, tasks, split_by_task,
        extra_manifest={
            "source_kind": spec.kind,
            "task_rule": spec.task_rule,
            "split_seed": spec.split_seed,
            "categories_per_split": categories_per_split,
            "class_names": {str(class_id[c]): c for c in classes},
            "task_names": {str(task_id[t]): t for t in task_names},
        })

    summary = {
        "out": str(out_path),
        "n_instances": int(features.shape[0]),
        "input_dim": int(features.shape[1]),
        "n_tasks": len(task_names),
        "n_classes": len(classes),
        "classes_dropped": sorted(dropped),
        "categories_per_split": categories_per_split,
        "per_class_min": int(min(tally[c] for c in classes)),
        "per_class_max": int(max(tally[c] for c in classes)),
        "feature_sha256": manifest["feature_sha256"],
    }
    return summary
