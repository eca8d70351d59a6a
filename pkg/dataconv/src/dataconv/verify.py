"""Independent re-validation of EPDS datasets.

Checks the binary structure, the manifest, and every dataset invariant
the training side relies on: finite features, class sets disjoint
across tasks, at least two classes per task, a minimum instance count
per class, splits forming an exact partition of the task ids, and the
feature checksum. Shares no parsing code with the training package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import epds


@dataclass
class Report:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, msg: str) -> None:
        self.errors.append(msg)

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)

    def lines(self) -> list[str]:
        out = [f"ERROR {m}" for m in self.errors]
        out += [f"WARN  {m}" for m in self.warnings]
        out.append(f"OK    {self.stats}" if self.ok else f"BAD   {self.stats}")
        return out


def verify(data_path, manifest_path=None, min_instances: int = 2) -> Report:
    report = Report()
    try:
        feats, labels, tasks, manifest = epds.read(data_path, manifest_path)
    except epds.FormatError as err:
        report.error(str(err))
        return report

    n, dim = feats.shape
    report.stats = {"n": int(n), "input_dim": int(dim),
                    "n_classes": int(len(np.unique(labels))),
                    "n_tasks": int(len(np.unique(tasks)))}

    if not np.all(np.isfinite(feats)):
        report.error("non-finite feature values")

    # class sets must be disjoint across tasks
    class_task: dict[int, int] = {}
    for cls, task in zip(labels.tolist(), tasks.tolist()):
        prev = class_task.get(cls)
        if prev is None:
            class_task[cls] = task
        elif prev != task:
            report.error(
                f"class {cls} appears in tasks {prev} and {task} "
                "(class sets must be disjoint across tasks)")
            break

    task_classes: dict[int, set] = {}
    for cls, task in class_task.items():
        task_classes.setdefault(task, set()).add(cls)
    for task, classes in sorted(task_classes.items()):
        if len(classes) < 2:
            report.error(f"task {task} has {len(classes)} class(es); need >= 2")

    counts = np.bincount(labels)
    thin = [int(c) for c in np.unique(labels) if counts[c] < min_instances]
    if thin:
        report.warn(f"{len(thin)} class(es) below {min_instances} instances: "
                    f"{thin[:8]}{'...' if len(thin) > 8 else ''}")

    # manifest splits must partition the task ids exactly
    assigned: dict[int, str] = {}
    for split, ts in manifest.get("splits", {}).items():
        if split not in epds.SPLITS:
            report.error(f"manifest has unknown split {split!r}")
            continue
        for t in ts:
            if t in assigned:
                report.error(f"task {t} assigned to both {assigned[t]} and {split}")
            assigned[int(t)] = split
    present = set(int(t) for t in np.unique(tasks))
    missing = present - set(assigned)
    extra = set(assigned) - present
    if missing:
        report.error(f"tasks without a split: {sorted(missing)}")
    if extra:
        report.warn(f"manifest lists absent tasks: {sorted(extra)}")

    want = manifest.get("feature_sha256")
    if want is not None:
        got = epds.feature_sha256(feats)
        if got != want:
            report.error(f"feature checksum mismatch: file {got[:16]}.. "
                         f"manifest {want[:16]}..")

    return report
