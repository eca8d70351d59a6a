"""Episode-level objectives: exact AUC, its smooth surrogate, and losses.

The exact AUC is the probability that an OoD query outscores an ID
query (ties counted 1/2 by default), computed in O(n log n) rank-sum
form; a brute-force pairwise implementation is kept alongside as the
test oracle. The smooth surrogate replaces the pairwise indicator with
a sigmoid so the whole episode pipeline stays differentiable.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from . import encoder as enc
from . import gmm
from .episodes import Episode


def exact_auc(ood_scores, id_scores, ties: str = "half") -> float:
    """Share of (OoD, ID) pairs ranked correctly.

    ``ties="half"`` counts equal scores 1/2 (the standard convention used
    for every reported metric); ``ties="strict"`` counts them 0.
    """
    ood = np.asarray(ood_scores, dtype=np.float64)
    idd = np.asarray(id_scores, dtype=np.float64)
    if ood.size == 0 or idd.size == 0:
        raise ValueError("exact_auc needs non-empty score sets")
    if ties not in ("half", "strict"):
        raise ValueError(f"unknown tie mode {ties!r}")

    ranks = rankdata(np.concatenate([ood, idd]), method="average")
    n_o, n_i = ood.size, idd.size
    u = ranks[:n_o].sum() - n_o * (n_o + 1) / 2.0
    auc = u / (n_o * n_i)
    if ties == "strict":
        vals_o, cnt_o = np.unique(ood, return_counts=True)
        vals_i, cnt_i = np.unique(idd, return_counts=True)
        common, io, ii = np.intersect1d(vals_o, vals_i, return_indices=True)
        tie_pairs = (cnt_o[io] * cnt_i[ii]).sum() if common.size else 0
        auc -= 0.5 * tie_pairs / (n_o * n_i)
    return float(auc)


def exact_auc_pairwise(ood_scores, id_scores, ties: str = "half") -> float:
    """Quadratic-time pairwise AUC; reference oracle for the fast path."""
    ood = np.asarray(ood_scores, dtype=np.float64)[:, None]
    idd = np.asarray(id_scores, dtype=np.float64)[None, :]
    if ood.size == 0 or idd.size == 0:
        raise ValueError("exact_auc needs non-empty score sets")
    wins = (ood > idd).sum()
    ties_n = (ood == idd).sum()
    total = ood.size * idd.size
    if ties == "half":
        return float((wins + 0.5 * ties_n) / total)
    return float(wins / total)


def smooth_auc(ood_scores: dc.Array, id_scores: dc.Array) -> dc.Array:
    """Differentiable AUC surrogate: mean sigmoid of pairwise score gaps."""
    n_o, n_i = ood_scores.shape[0], id_scores.shape[0]
    if n_o == 0 or n_i == 0:
        raise ValueError("smooth_auc needs non-empty score sets")
    o = dc.tile_cols(dc.reshape(ood_scores, (n_o, 1)), n_i)
    i = dc.tile_rows(dc.reshape(id_scores, (1, n_i)), n_o)
    return dc.reduce_mean(dc.sigmoid(dc.sub(o, i)))


def episode_scores(episode: Episode, params: enc.CommonParams,
                   variant: gmm.VariantSpec, train_mode: bool = False,
                   rng: np.random.Generator | None = None,
                   use_lowrank: bool | None = None
                   ) -> tuple[dc.Array, dc.Array]:
    """Embed, standardize on the support, adapt, score both query sets.

    Returns (id_scores, ood_scores). ``use_lowrank`` forces or forbids the
    low-rank scoring path for the full-covariance family (None = auto by
    latent dim vs class size).
    """
    n_s = len(episode.support_x)
    n_i = len(episode.query_id_x)
    stacked = dc.Array(np.concatenate(
        [episode.support_x, episode.query_id_x, episode.query_ood_x]))
    z = enc.embed(params, stacked, train_mode=train_mode, rng=rng)
    sup_z = dc.take_rows(z, np.arange(n_s))
    qry_z = dc.take_rows(z, np.arange(n_s, z.shape[0]))
    sup_std, qry_std, _ = enc.standardize(sup_z, qry_z)

    scores = _score_queries(episode, params, variant, sup_std, qry_std, use_lowrank)
    id_scores = dc.take_rows(scores, np.arange(n_i))
    ood_scores = dc.take_rows(scores, np.arange(n_i, scores.shape[0]))
    return id_scores, ood_scores


def _score_queries(episode: Episode, params: enc.CommonParams,
                   variant: gmm.VariantSpec, sup_std: dc.Array,
                   qry_std: dc.Array, use_lowrank: bool | None) -> dc.Array:
    if variant.kind == "full_gmm":
        counts = np.bincount(episode.support_y, minlength=episode.n_way)
        if use_lowrank is None:
            use_lowrank = gmm.prefer_lowrank(params.config.latent_dim, counts)
        if use_lowrank:
            dens = gmm.log_density_woodbury(
                sup_std, episode.support_y, params.shrinkage(), qry_std,
                shrinkage_inside=variant.shrinkage_inside)
            return dc.scale(dens, -1.0)
    return gmm.variant_score(variant, sup_std, episode.support_y,
                             params.shrinkage(), qry_std)


def meta_objective(kind: str, episode: Episode, params: enc.CommonParams,
                   variant: gmm.VariantSpec, train_mode: bool = True,
                   rng: np.random.Generator | None = None) -> dc.Array:
    """Scalar loss for one episode.

    ``auc`` is the negated smooth AUC over ID/OoD query scores. The
    ``cross_entropy`` alternative is the mean negative log posterior of
    the ID queries' true classes; it never touches the OoD queries.
    """
    if kind == "auc":
        id_scores, ood_scores = episode_scores(
            episode, params, variant, train_mode=train_mode, rng=rng)
        return dc.scale(smooth_auc(ood_scores, id_scores), -1.0)

    if kind == "cross_entropy":
        n_s = len(episode.support_x)
        stacked = dc.Array(np.concatenate([episode.support_x, episode.query_id_x]))
        z = enc.embed(params, stacked, train_mode=train_mode, rng=rng)
        sup_z = dc.take_rows(z, np.arange(n_s))
        qry_z = dc.take_rows(z, np.arange(n_s, z.shape[0]))
        sup_std, qry_std, _ = enc.standardize(sup_z, qry_z)
        log_post = gmm.variant_log_posteriors(
            variant, sup_std, episode.support_y, params.shrinkage(), qry_std)
        if log_post is None:
            raise ValueError(
                f"variant {variant.kind!r} has no class posterior; "
                "cross_entropy training needs a class-aware family")
        m, k = log_post.shape
        flat = dc.reshape(log_post, (m * k, 1))
        picked = dc.take_rows(flat, np.arange(m) * k + np.asarray(episode.query_id_y))
        return dc.scale(dc.reduce_mean(picked), -1.0)

    raise ValueError(f"unknown objective kind {kind!r}")
