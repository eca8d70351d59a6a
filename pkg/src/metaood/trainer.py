"""Outer meta-training loop: Adam over episodes with early stopping.

Each step samples an episode from the train split, computes the episode
loss (negated smooth AUC by default), backpropagates through the
closed-form density adaptation, and applies a clipped Adam update to
the shared parameters. After every epoch the exact AUC over a fixed
validation episode list decides early stopping; the best-validation
parameter snapshot is what training returns. Fully deterministic given
the config seed (single-threaded episode order).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import encoder as enc
from . import gmm
from . import objective as obj
from .episodes import Episode, EpisodeSpec, TaskDataset, fixed_eval_episodes, sample_episode


@dataclass
class TrainConfig:
    episode_spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    objective: str = "auc"                      # auc | cross_entropy
    variant: gmm.VariantSpec = field(default_factory=gmm.VariantSpec)
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 5000
    episodes_per_epoch: int = 100
    val_episodes: int = 64
    patience: int = 100
    grad_clip: float = 10.0
    seed: int = 0
    val_episode_spec: EpisodeSpec | None = None  # None: same as episode_spec

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.objective not in ("auc", "cross_entropy"):
            raise ValueError(f"unknown objective {self.objective!r}")


class Adam:
    """Standard Adam with bias correction; one slot pair per parameter."""

    def __init__(self, params: list[dc.Array], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients down when their joint L2 norm exceeds the cap."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


@dataclass
class EpochRecord:
    epoch: int
    train_score: float     # mean of -loss; equals smooth AUC for the auc objective
    val_auc: float
    shrinkage: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    aborted: bool = False
    diagnostic: str = ""
    final_params: "enc.CommonParams | None" = None  # state after the last epoch

    COLUMNS = ("epoch", "train_score", "val_auc", "shrinkage", "seconds")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_score), repr(r.val_auc),
                                 repr(r.shrinkage), f"{r.seconds:.3f}"])


class TrainingAborted(Exception):
    """Raised on a non-finite loss or gradient; carries the last good state."""

    def __init__(self, message: str, params: enc.CommonParams, log: TrainLog):
        super().__init__(message)
        self.params = params
        self.log = log


@dataclass
class EvalReport:
    episode_auc: np.ndarray
    episode_accuracy: np.ndarray      # NaN where the variant has no classifier
    episode_task: np.ndarray
    id_scores: list[np.ndarray] | None = None
    ood_scores: list[np.ndarray] | None = None

    @property
    def n(self) -> int:
        return len(self.episode_auc)

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.episode_auc))

    @property
    def auc_stderr(self) -> float:
        return _stderr(self.episode_auc)

    @property
    def accuracy_mean(self) -> float:
        vals = self.episode_accuracy[~np.isnan(self.episode_accuracy)]
        return float(np.mean(vals)) if len(vals) else float("nan")

    @property
    def accuracy_stderr(self) -> float:
        vals = self.episode_accuracy[~np.isnan(self.episode_accuracy)]
        return _stderr(vals) if len(vals) else float("nan")


def _stderr(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def evaluate_episode(params: enc.CommonParams, episode: Episode,
                     variant: gmm.VariantSpec) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Exact AUC and ID classification accuracy for one episode (eval mode)."""
    n_s = len(episode.support_x)
    n_i = len(episode.query_id_x)
    stacked = dc.Array(np.concatenate(
        [episode.support_x, episode.query_id_x, episode.query_ood_x]))
    z = enc.embed(params, stacked, train_mode=False)
    sup_z = dc.take_rows(z, np.arange(n_s))
    qry_z = dc.take_rows(z, np.arange(n_s, z.shape[0]))
    sup_std, qry_std, _ = enc.standardize(sup_z, qry_z)

    accuracy = float("nan")
    if variant.kind == "full_gmm":
        counts = np.bincount(episode.support_y, minlength=episode.n_way)
        if gmm.prefer_lowrank(params.config.latent_dim, counts):
            terms = gmm.class_log_terms_lowrank(
                sup_std, episode.support_y, params.shrinkage(), qry_std,
                shrinkage_inside=variant.shrinkage_inside)
        else:
            fitted = gmm.adapt(sup_std, episode.support_y, params.shrinkage(),
                               shrinkage_inside=variant.shrinkage_inside)
            terms = gmm._class_log_terms(fitted, qry_std)
        scores = -dc.logsumexp(terms, axis=1).data
        pred = terms.data[:n_i].argmax(axis=1)
        accuracy = float(np.mean(pred == episode.query_id_y))
    else:
        scores = gmm.variant_score(variant, sup_std, episode.support_y,
                                   params.shrinkage(), qry_std).data
        log_post = gmm.variant_log_posteriors(variant, sup_std, episode.support_y,
                                              params.shrinkage(),
                                              dc.take_rows(qry_std, np.arange(n_i)))
        if log_post is not None:
            accuracy = float(np.mean(log_post.data.argmax(axis=1) == episode.query_id_y))

    id_scores, ood_scores = scores[:n_i], scores[n_i:]
    auc = obj.exact_auc(ood_scores, id_scores)
    return auc, accuracy, id_scores, ood_scores


def evaluate(params: enc.CommonParams, episodes: list[Episode],
             variant: gmm.VariantSpec, collect_scores: bool = False) -> EvalReport:
    """Per-episode exact AUC and accuracy with mean and standard error."""
    if not episodes:
        raise ValueError("evaluate needs at least one episode")
    aucs, accs, tasks = [], [], []
    ids, oods = ([], []) if collect_scores else (None, None)
    for episode in episodes:
        auc, acc, id_s, ood_s = evaluate_episode(params, episode, variant)
        aucs.append(auc)
        accs.append(acc)
        tasks.append(episode.task_id)
        if collect_scores:
            ids.append(id_s)
            oods.append(ood_s)
    return EvalReport(
        episode_auc=np.asarray(aucs),
        episode_accuracy=np.asarray(accs),
        episode_task=np.asarray(tasks),
        id_scores=ids,
        ood_scores=oods,
    )


def train(data: TaskDataset, enc_config: enc.EncoderConfig,
          cfg: TrainConfig) -> tuple[enc.CommonParams, TrainLog]:
    """Meta-train shared parameters; returns the best-validation snapshot.

    Raises ``TrainingAborted`` (carrying the last good snapshot and the
    log) if any loss or gradient goes non-finite.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_episode = np.random.default_rng(seeds[0])
    rng_dropout = np.random.default_rng(seeds[1])
    params = enc.init(enc_config, seed=seeds[2])
    param_list = params.parameters()
    adam = Adam(param_list, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    val_spec = cfg.val_episode_spec or cfg.episode_spec
    val_eps = fixed_eval_episodes(data, val_spec, cfg.val_episodes,
                                  seed=seeds[3], split="val")

    log = TrainLog()
    best = params.copy()
    best_auc = -np.inf
    stale_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        scores = []
        for _ in range(cfg.episodes_per_epoch):
            episode = sample_episode(data, cfg.episode_spec, rng_episode,
                                     split="train")
            try:
                with dc.Tape():
                    loss = obj.meta_objective(cfg.objective, episode, params,
                                              cfg.variant, train_mode=True,
                                              rng=rng_dropout)
                dc.backward(loss, leaves=param_list)
            except dc.NonFiniteError as err:
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}: {err}", best, log) from err
            grads = [p.grad for p in param_list]
            if any(not np.all(np.isfinite(g)) for g in grads):
                raise TrainingAborted(
                    f"non-finite gradient at epoch {epoch}", best, log)
            clip_global_norm(grads, cfg.grad_clip)
            adam.step(grads)
            scores.append(-loss.item())

        val = evaluate(params, val_eps, cfg.variant)
        log.records.append(EpochRecord(
            epoch=epoch,
            train_score=float(np.mean(scores)),
            val_auc=val.auc_mean,
            shrinkage=params.shrinkage().item(),
            seconds=time.perf_counter() - tic,
        ))
        if val.auc_mean > best_auc:
            best_auc = val.auc_mean
            best = params.copy()
            log.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                break
    log.final_params = params.copy()
    return best, log
