"""Closed-form per-task density adaptation and OoD scoring.

Given standardized support embeddings with class labels, the mixture is
fitted in closed form: class weight = class share of the support, mean =
class mean, covariance = population class scatter plus a ridge
(``shrinkage``) that keeps every covariance positive definite and is
itself meta-learned. Scoring is the negative mixture log density,
evaluated through cached Cholesky factors so gradients flow back into
the embeddings and the ridge.

A low-rank path computes identical scores without ever forming a DxD
inverse, which is the cheaper route whenever the latent dimension
exceeds the per-class support size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER = 1e-8  # retry ridge (times trace/D) after a failed factorization


class AdaptError(Exception):
    pass


@dataclass(frozen=True)
class VariantSpec:
    """Which density family scores queries.

    kind: full_gmm | shared_cov | spherical | single_gaussian | kde.
    ``temperature`` scales the spherical covariance; ``bandwidth`` is the
    kde kernel width (None = Scott's rule from the support).
    ``shrinkage_inside`` divides the ridge by the class size instead of
    adding it after averaging (a reparameterization of the ridge).
    """

    kind: str = "full_gmm"
    temperature: float = 1.0
    bandwidth: float | None = None
    shrinkage_inside: bool = False

    def __post_init__(self):
        if self.kind not in ("full_gmm", "shared_cov", "spherical",
                             "single_gaussian", "kde"):
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.bandwidth is not None and self.bandwidth <= 0.0:
            raise ValueError("bandwidth must be positive")


@dataclass
class GmmParams:
    """Adapted mixture: one weight/mean/covariance (+ Cholesky) per class."""

    class_weights: np.ndarray        # (K,), sums to 1
    means: list[dc.Array]            # each (1, D)
    covariances: list[dc.Array]      # each (D, D)
    chol_factors: list[dc.Array]     # each (D, D) lower
    class_counts: np.ndarray         # (K,)

    @property
    def n_classes(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means[0].shape[1]


def _class_rows(labels: np.ndarray, n_way: int) -> list[np.ndarray]:
    labels = np.asarray(labels)
    rows = [np.flatnonzero(labels == k) for k in range(n_way)]
    for k, r in enumerate(rows):
        if len(r) == 0:
            raise AdaptError(f"class {k} has no support instances")
    return rows


def _chol_with_retry(sigma: dc.Array) -> dc.Array:
    try:
        return dc.cholesky(sigma)
    except dc.NotPositiveDefiniteError:
        d = sigma.shape[0]
        bump = JITTER * float(np.trace(sigma.data)) / d
        return dc.cholesky(dc.add(sigma, dc.Array(bump * np.eye(d))))


def adapt(support_z: dc.Array, labels, shrinkage: dc.Array,
          shrinkage_inside: bool = False) -> GmmParams:
    """Closed-form maximum-likelihood fit of the labeled support set.

    Means and scatters use the population form (divisor = class size);
    the scatter is symmetrized before the ridge to kill float asymmetry.
    Differentiable w.r.t. the embeddings and the ridge.
    """
    labels = np.asarray(labels)
    n_way = int(labels.max()) + 1 if len(labels) else 0
    if n_way < 1:
        raise AdaptError("empty support set")
    rows = _class_rows(labels, n_way)
    n_s, d = support_z.shape
    eye = dc.Array(np.eye(d))

    weights, means, covs, chols, counts = [], [], [], [], []
    for k in range(n_way):
        n_k = len(rows[k])
        z_k = dc.take_rows(support_z, rows[k])
        mu = dc.reshape(dc.reduce_mean(z_k, axis=0), (1, d))
        centered = dc.sub(z_k, dc.tile_rows(mu, n_k))
        scatter_sum = dc.matmul(dc.transpose(centered), centered)
        sym = dc.scale(dc.add(scatter_sum, dc.transpose(scatter_sum)), 0.5)
        if shrinkage_inside:
            sigma = dc.scale(dc.add(sym, dc.mul(eye, shrinkage)), 1.0 / n_k)
        else:
            sigma = dc.add(dc.scale(sym, 1.0 / n_k), dc.mul(eye, shrinkage))
        chols.append(_chol_with_retry(sigma))
        covs.append(sigma)
        means.append(mu)
        weights.append(n_k / n_s)
        counts.append(n_k)
    return GmmParams(
        class_weights=np.asarray(weights),
        means=means,
        covariances=covs,
        chol_factors=chols,
        class_counts=np.asarray(counts),
    )


def _class_log_terms(params: GmmParams, z: dc.Array) -> dc.Array:
    """(M, K) matrix of log weight + Gaussian log density per class."""
    m, d = z.shape
    cols = []
    for k in range(params.n_classes):
        r = dc.sub(z, dc.tile_rows(params.means[k], m))
        w = dc.trisolve(params.chol_factors[k], dc.transpose(r))
        quad = dc.reduce_sum(dc.mul(w, w), axis=0)
        logdet = dc.scale(dc.reduce_sum(dc.log(dc.diag_part(params.chol_factors[k]))), 2.0)
        const = dc.Array(np.log(params.class_weights[k]) - 0.5 * d * LOG_2PI)
        term = dc.add(dc.add(const, dc.scale(logdet, -0.5)), dc.scale(quad, -0.5))
        cols.append(dc.reshape(term, (m, 1)))
    return dc.concat(cols, axis=1)


def log_density(params: GmmParams, z: dc.Array) -> dc.Array:
    """Log mixture density of each query row, as a stable logsumexp."""
    return dc.logsumexp(_class_log_terms(params, z), axis=1)


def ood_score(params: GmmParams, z: dc.Array) -> dc.Array:
    """Negative log density: higher means more out-of-distribution."""
    return dc.scale(log_density(params, z), -1.0)


def log_posteriors(params: GmmParams, z: dc.Array) -> dc.Array:
    """(M, K) log class posteriors under the adapted mixture."""
    terms = _class_log_terms(params, z)
    m = z.shape[0]
    lse = dc.reshape(dc.logsumexp(terms, axis=1), (m, 1))
    return dc.sub(terms, dc.tile_cols(lse, params.n_classes))


def classify(params: GmmParams, z: dc.Array) -> tuple[np.ndarray, np.ndarray]:
    """Class index (lowest-index tie-break) plus the posterior matrix."""
    post = np.exp(log_posteriors(params, z).data)
    return post.argmax(axis=1), post


def class_log_terms_lowrank(support_z: dc.Array, labels, shrinkage: dc.Array,
                            z: dc.Array, shrinkage_inside: bool = False) -> dc.Array:
    """(M, K) log weight + Gaussian log density, via the low-rank identity.

    With the centered class matrix A (N_k x D) the precision and log
    determinant come from the N_k x N_k system A A^T + N_k * ridge * I,
    so the cost is O(K N^3) instead of O(K D^3).
    """
    labels = np.asarray(labels)
    n_way = int(labels.max()) + 1 if len(labels) else 0
    if n_way < 1:
        raise AdaptError("empty support set")
    rows = _class_rows(labels, n_way)
    n_s, d = support_z.shape
    m = z.shape[0]

    cols = []
    for k in range(n_way):
        n_k = len(rows[k])
        z_k = dc.take_rows(support_z, rows[k])
        mu = dc.reshape(dc.reduce_mean(z_k, axis=0), (1, d))
        a = dc.sub(z_k, dc.tile_rows(mu, n_k))
        ridge = dc.scale(shrinkage, 1.0 / n_k) if shrinkage_inside else shrinkage

        gram = dc.add(dc.matmul(a, dc.transpose(a)),
                      dc.mul(dc.Array(np.eye(n_k)), dc.scale(ridge, float(n_k))))
        sym = dc.scale(dc.add(gram, dc.transpose(gram)), 0.5)
        chol = _chol_with_retry(sym)

        r = dc.sub(z, dc.tile_rows(mu, m))
        full = dc.reduce_sum(dc.mul(r, r), axis=1)
        proj = dc.trisolve(chol, dc.matmul(a, dc.transpose(r)))
        removed = dc.reduce_sum(dc.mul(proj, proj), axis=0)
        quad = dc.div(dc.sub(full, removed), ridge)

        # log det(scatter/N + ridge I) = (D-N) log ridge + log det(gram/N)
        logdet = dc.add(dc.scale(dc.log(ridge), float(d - n_k)),
                        dc.add(dc.scale(dc.reduce_sum(dc.log(dc.diag_part(chol))), 2.0),
                               dc.Array(-n_k * np.log(n_k))))
        const = dc.Array(np.log(n_k / n_s) - 0.5 * d * LOG_2PI)
        term = dc.add(dc.add(const, dc.scale(logdet, -0.5)), dc.scale(quad, -0.5))
        cols.append(dc.reshape(term, (m, 1)))
    return dc.concat(cols, axis=1)


def log_density_woodbury(support_z: dc.Array, labels, shrinkage: dc.Array,
                         z: dc.Array, shrinkage_inside: bool = False) -> dc.Array:
    """Same values as adapt + log_density, without forming a DxD inverse."""
    terms = class_log_terms_lowrank(support_z, labels, shrinkage, z,
                                    shrinkage_inside=shrinkage_inside)
    return dc.logsumexp(terms, axis=1)


def prefer_lowrank(latent_dim: int, class_counts) -> bool:
    """Pick the low-rank scoring path when D exceeds every class size."""
    return latent_dim > int(np.max(class_counts))


# ---------------------------------------------------------------------------
# scoring-rule variants


def _pooled_covariance(support_z: dc.Array, labels, shrinkage: dc.Array,
                       rows: list[np.ndarray]) -> tuple[list[dc.Array], dc.Array]:
    n_s, d = support_z.shape
    means = []
    scatter_total = None
    for k, r in enumerate(rows):
        n_k = len(r)
        z_k = dc.take_rows(support_z, r)
        mu = dc.reshape(dc.reduce_mean(z_k, axis=0), (1, d))
        centered = dc.sub(z_k, dc.tile_rows(mu, n_k))
        s = dc.matmul(dc.transpose(centered), centered)
        scatter_total = s if scatter_total is None else dc.add(scatter_total, s)
        means.append(mu)
    sym = dc.scale(dc.add(scatter_total, dc.transpose(scatter_total)), 0.5)
    pooled = dc.add(dc.scale(sym, 1.0 / n_s), dc.mul(dc.Array(np.eye(d)), shrinkage))
    return means, pooled


def _spherical_terms(support_z: dc.Array, labels, temperature: float,
                     z: dc.Array, rows: list[np.ndarray]) -> dc.Array:
    n_way = len(rows)
    m, d = z.shape
    cols = []
    const = -np.log(n_way) - 0.5 * d * np.log(2.0 * np.pi * temperature)
    for r in rows:
        z_k = dc.take_rows(support_z, r)
        mu = dc.reshape(dc.reduce_mean(z_k, axis=0), (1, d))
        diff = dc.sub(z, dc.tile_rows(mu, m))
        quad = dc.reduce_sum(dc.mul(diff, diff), axis=1)
        term = dc.add(dc.Array(const), dc.scale(quad, -0.5 / temperature))
        cols.append(dc.reshape(term, (m, 1)))
    return dc.concat(cols, axis=1)


def _kde_bandwidth(support_z: dc.Array, spec: VariantSpec) -> dc.Array:
    if spec.bandwidth is not None:
        return dc.Array(float(spec.bandwidth))
    # Scott's rule: N^(-1/(D+4)) times the pooled support std
    n, d = support_z.shape
    mu = dc.reshape(dc.reduce_mean(support_z, axis=0), (1, d))
    centered = dc.sub(support_z, dc.tile_rows(mu, n))
    pooled_var = dc.reduce_mean(dc.mul(centered, centered))
    return dc.scale(dc.sqrt(pooled_var), float(n ** (-1.0 / (d + 4))))


def variant_score(spec: VariantSpec, support_z: dc.Array, labels,
                  shrinkage: dc.Array, z: dc.Array) -> dc.Array:
    """OoD scores (higher = more anomalous) under the chosen model family.

    Labels are ignored by the unlabeled families (single_gaussian, kde).
    All families are monotone scores; only full_gmm and single_gaussian
    are calibrated log densities.
    """
    labels = np.asarray(labels)
    m, d = z.shape
    if spec.kind == "full_gmm":
        params = adapt(support_z, labels, shrinkage,
                       shrinkage_inside=spec.shrinkage_inside)
        return ood_score(params, z)

    if spec.kind == "shared_cov":
        rows = _class_rows(labels, int(labels.max()) + 1)
        means, pooled = _pooled_covariance(support_z, labels, shrinkage, rows)
        chol = _chol_with_retry(pooled)
        cols = []
        for mu in means:
            r = dc.sub(z, dc.tile_rows(mu, m))
            w = dc.trisolve(chol, dc.transpose(r))
            quad = dc.reduce_sum(dc.mul(w, w), axis=0)
            cols.append(dc.reshape(quad, (m, 1)))
        # squared Mahalanobis distance to the nearest class mean
        return dc.reduce_min(dc.concat(cols, axis=1), axis=1)

    if spec.kind == "spherical":
        rows = _class_rows(labels, int(labels.max()) + 1)
        terms = _spherical_terms(support_z, labels, spec.temperature, z, rows)
        return dc.scale(dc.logsumexp(terms, axis=1), -1.0)

    if spec.kind == "single_gaussian":
        merged = np.zeros(support_z.shape[0], dtype=np.int64)
        params = adapt(support_z, merged, shrinkage,
                       shrinkage_inside=spec.shrinkage_inside)
        return ood_score(params, z)

    # kde: mean of isotropic kernels centered on every support point
    n = support_z.shape[0]
    h = _kde_bandwidth(support_z, spec)
    z_sq = dc.tile_cols(dc.reshape(dc.reduce_sum(dc.mul(z, z), axis=1), (m, 1)), n)
    s_sq = dc.tile_rows(dc.reshape(dc.reduce_sum(dc.mul(support_z, support_z), axis=1),
                                   (1, n)), m)
    cross = dc.matmul(z, dc.transpose(support_z))
    sqdist = dc.add(dc.sub(z_sq, dc.scale(cross, 2.0)), s_sq)
    h_sq = dc.mul(h, h)
    expo = dc.scale(dc.div(sqdist, h_sq), -0.5)
    log_kernel_mix = dc.add(dc.logsumexp(expo, axis=1), dc.Array(-np.log(n)))
    log_norm = dc.add(dc.Array(-0.5 * d * LOG_2PI),
                      dc.scale(dc.log(h_sq), -0.5 * d))
    return dc.scale(dc.add(log_kernel_mix, log_norm), -1.0)


def variant_log_posteriors(spec: VariantSpec, support_z: dc.Array, labels,
                           shrinkage: dc.Array, z: dc.Array) -> dc.Array | None:
    """(M, K) log posteriors where the family defines them, else None."""
    labels = np.asarray(labels)
    m = z.shape[0]
    if spec.kind == "full_gmm":
        params = adapt(support_z, labels, shrinkage,
                       shrinkage_inside=spec.shrinkage_inside)
        return log_posteriors(params, z)
    if spec.kind in ("shared_cov", "spherical"):
        rows = _class_rows(labels, int(labels.max()) + 1)
        if spec.kind == "shared_cov":
            means, pooled = _pooled_covariance(support_z, labels, shrinkage, rows)
            chol = _chol_with_retry(pooled)
            cols = []
            n_s = support_z.shape[0]
            for k, mu in enumerate(means):
                r = dc.sub(z, dc.tile_rows(mu, m))
                w = dc.trisolve(chol, dc.transpose(r))
                quad = dc.reduce_sum(dc.mul(w, w), axis=0)
                prior = np.log(len(rows[k]) / n_s)
                cols.append(dc.reshape(dc.add(dc.Array(prior), dc.scale(quad, -0.5)),
                                       (m, 1)))
            terms = dc.concat(cols, axis=1)
        else:
            terms = _spherical_terms(support_z, labels, spec.temperature, z, rows)
        lse = dc.reshape(dc.logsumexp(terms, axis=1), (m, 1))
        return dc.sub(terms, dc.tile_cols(lse, len(rows)))
    return None  # single_gaussian and kde carry no class structure
