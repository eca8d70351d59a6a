"""Synthetic task families with known class-conditional densities.

Each task holds a few Gaussian classes whose means live in a small
"signal" subspace; high-variance nuisance dimensions are appended, and
the full vector is pushed through a fixed stack of additive coupling
layers shared by all tasks. Coupling layers are volume preserving and
exactly invertible, so the true density of an observed point equals the
generative Gaussian-mixture density at its unwarped coordinates. That
makes an exact scoring oracle available for every sampled episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episodes import TaskDataset


@dataclass(frozen=True)
class GeneratorSpec:
    n_tasks: int = 15
    classes_per_task: int = 3
    points_per_class: int = 40
    signal_dim: int = 2
    noise_dim: int = 12
    noise_scale: float = 20.0
    mean_separation: float = 10.0     # min distance between any two class means
    cov_eigenvalues: tuple[float, float] = (0.5, 1.5)
    warp_layers: int = 2
    warp_hidden: int = 16
    warp_scale: float = 1.0           # 0 disables the warp
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.n_tasks < 2 or self.classes_per_task < 2:
            raise ValueError("need >= 2 tasks and >= 2 classes per task")
        if self.points_per_class < 2 or self.signal_dim < 1 or self.noise_dim < 0:
            raise ValueError("degenerate size parameters")
        lo, hi = self.cov_eigenvalues
        if lo <= 0 or hi < lo:
            raise ValueError("covariance eigenvalue range must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    @property
    def input_dim(self) -> int:
        return self.signal_dim + self.noise_dim


class CouplingWarp:
    """Stack of additive coupling layers: unit Jacobian, exact inverse.

    Layer i splits the coordinates into halves (alternating which half is
    held fixed) and shifts the other half by a small tanh network of the
    fixed half.
    """

    def __init__(self, dim: int, layers: list[dict]):
        self.dim = dim
        self.layers = layers  # each: {"w1": (A,h), "b1": (h,), "w2": (h,B)}

    @classmethod
    def random(cls, dim: int, n_layers: int, hidden: int, scale: float,
               rng: np.random.Generator) -> "CouplingWarp":
        layers = []
        half = dim // 2
        for i in range(n_layers):
            n_fixed = half if i % 2 == 0 else dim - half
            n_moved = dim - n_fixed
            layers.append({
                "w1": rng.normal(0.0, 1.0 / np.sqrt(max(n_fixed, 1)),
                                 size=(n_fixed, hidden)),
                "b1": rng.normal(0.0, 1.0, size=hidden),
                "w2": rng.normal(0.0, scale / np.sqrt(hidden), size=(hidden, n_moved)),
            })
        return cls(dim, layers)

    def _split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        half = self.dim // 2
        idx = np.arange(self.dim)
        if i % 2 == 0:
            return idx[:half], idx[half:]
        return idx[half:], idx[:half]

    def _shift(self, i: int, fixed_part: np.ndarray) -> np.ndarray:
        layer = self.layers[i]
        return np.tanh(fixed_part @ layer["w1"] + layer["b1"]) @ layer["w2"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = np.array(x, dtype=np.float64)
        for i in range(len(self.layers)):
            fixed, moved = self._split(i)
            y[:, moved] += self._shift(i, y[:, fixed])
        return y

    def inverse(self, y: np.ndarray) -> np.ndarray:
        x = np.array(y, dtype=np.float64)
        for i in reversed(range(len(self.layers))):
            fixed, moved = self._split(i)
            x[:, moved] -= self._shift(i, x[:, fixed])
        return x

    def to_json(self) -> dict:
        return {"dim": self.dim,
                "layers": [{k: v.tolist() for k, v in layer.items()}
                           for layer in self.layers]}

    @classmethod
    def from_json(cls, obj: dict) -> "CouplingWarp":
        return cls(obj["dim"],
                   [{k: np.asarray(v, dtype=np.float64) for k, v in layer.items()}
                    for layer in obj["layers"]])


@dataclass
class ClassTruth:
    class_id: int
    task_id: int
    mean: np.ndarray   # full input_dim
    cov: np.ndarray    # full input_dim x input_dim
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._chol = np.linalg.cholesky(self.cov)

    def log_density(self, x_latent: np.ndarray) -> np.ndarray:
        d = self.mean.shape[0]
        diff = x_latent - self.mean
        w = np.linalg.solve(self._chol, diff.T)
        quad = np.sum(w * w, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)


class GroundTruth:
    """Exact densities of the generated data, usable as a scoring oracle."""

    def __init__(self, spec_dict: dict, classes: list[ClassTruth], warp: CouplingWarp):
        self.spec = spec_dict
        self.classes = {c.class_id: c for c in classes}
        self.warp = warp

    def oracle_scores(self, x: np.ndarray, class_ids) -> np.ndarray:
        """Negative log density under the uniform mixture of the given classes."""
        latent = self.warp.inverse(np.asarray(x, dtype=np.float64))
        logs = np.stack([self.classes[int(c)].log_density(latent) for c in class_ids],
                        axis=1)
        k = logs.shape[1]
        m = logs.max(axis=1, keepdims=True)
        mix = np.log(np.exp(logs - m).sum(axis=1)) + m[:, 0] - np.log(k)
        return -mix

    def to_json(self) -> dict:
        return {
            "format": "synth-ground-truth",
            "version": 1,
            "generator": self.spec,
            "classes": [{
                "class_id": c.class_id,
                "task_id": c.task_id,
                "mean": c.mean.tolist(),
                "cov": c.cov.tolist(),
            } for c in self.classes.values()],
            "warp": self.warp.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        if obj.get("format") != "synth-ground-truth":
            raise ValueError("not a ground-truth file")
        classes = [ClassTruth(class_id=c["class_id"], task_id=c["task_id"],
                              mean=np.asarray(c["mean"]), cov=np.asarray(c["cov"]))
                   for c in obj["classes"]]
        return cls(obj["generator"], classes, CouplingWarp.from_json(obj["warp"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


def _spread_means(total: int, dim: int, min_dist: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample means with a pairwise distance floor."""
    box = 0.75 * min_dist * total ** (1.0 / dim)
    means: list[np.ndarray] = []
    misses = 0
    while len(means) < total:
        p = rng.uniform(-box, box, size=dim)
        if all(np.linalg.norm(p - m) >= min_dist for m in means):
            means.append(p)
            misses = 0
        else:
            misses += 1
            if misses > 200:  # box too tight for the remaining points
                box *= 1.25
                misses = 0
    return np.stack(means)


def _random_covariance(dim: int, eig_range: tuple[float, float],
                       rng: np.random.Generator) -> np.ndarray:
    eigs = rng.uniform(eig_range[0], eig_range[1], size=dim)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return (q * eigs) @ q.T


def _assign_splits(n_tasks: int, fractions: tuple[float, float, float],
                   rng: np.random.Generator) -> dict[int, str]:
    # largest-remainder apportionment; a split may end up empty for tiny
    # generators, in which case sampling from it fails with a clear error
    quotas = np.asarray(fractions) * n_tasks
    counts = np.floor(quotas).astype(int)
    for i in np.argsort(-(quotas - counts))[: n_tasks - counts.sum()]:
        counts[i] += 1
    order = rng.permutation(n_tasks).tolist()
    split: dict[int, str] = {}
    for name, count in zip(("train", "val", "test"), counts):
        for task in order[:count]:
            split[task] = name
        order = order[count:]
    return split


def synth_tasks(spec: GeneratorSpec, seed: int) -> tuple[TaskDataset, GroundTruth]:
    """Generate a task-partitioned dataset plus its exact density oracle."""
    rng = np.random.default_rng(seed)
    total_classes = spec.n_tasks * spec.classes_per_task
    signal_means = _spread_means(total_classes, spec.signal_dim,
                                 spec.mean_separation, rng)

    dim = spec.input_dim
    rows, labels, tasks = [], [], []
    truths: list[ClassTruth] = []
    for task in range(spec.n_tasks):
        for j in range(spec.classes_per_task):
            cls = task * spec.classes_per_task + j
            cov_sig = _random_covariance(spec.signal_dim, spec.cov_eigenvalues, rng)
            chol = np.linalg.cholesky(cov_sig)
            pts = signal_means[cls] + rng.normal(
                size=(spec.points_per_class, spec.signal_dim)) @ chol.T
            if spec.noise_dim:
                noise = spec.noise_scale * rng.normal(
                    size=(spec.points_per_class, spec.noise_dim))
                pts = np.concatenate([pts, noise], axis=1)
            rows.append(pts)
            labels.extend([cls] * spec.points_per_class)
            tasks.extend([task] * spec.points_per_class)

            mean_full = np.concatenate([signal_means[cls], np.zeros(spec.noise_dim)])
            cov_full = np.zeros((dim, dim))
            cov_full[:spec.signal_dim, :spec.signal_dim] = cov_sig
            if spec.noise_dim:
                idx = np.arange(spec.signal_dim, dim)
                cov_full[idx, idx] = spec.noise_scale ** 2
            truths.append(ClassTruth(class_id=cls, task_id=task,
                                     mean=mean_full, cov=cov_full))

    features = np.concatenate(rows, axis=0)
    warp = CouplingWarp.random(dim, spec.warp_layers if spec.warp_scale > 0 else 0,
                               spec.warp_hidden, spec.warp_scale, rng)
    features = warp.forward(features)

    split_by_task = _assign_splits(spec.n_tasks, spec.split_fractions, rng)
    dataset = TaskDataset(
        features=features,
        class_labels=np.asarray(labels, dtype=np.int64),
        task_ids=np.asarray(tasks, dtype=np.int64),
        split_by_task=split_by_task,
    )
    truth = GroundTruth(spec_dict=vars_of(spec), classes=truths, warp=warp)
    return dataset, truth


def vars_of(spec: GeneratorSpec) -> dict:
    d = {}
    for name in spec.__dataclass_fields__:
        v = getattr(spec, name)
        d[name] = list(v) if isinstance(v, tuple) else v
    return d


def spec_from_dict(obj: dict) -> GeneratorSpec:
    kwargs = dict(obj)
    for name in ("cov_eigenvalues", "split_fractions"):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    return GeneratorSpec(**kwargs)
