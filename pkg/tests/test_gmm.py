import numpy as np
import pytest

from metaood import diffcore as dc
from metaood import gmm
from helpers import check_gradients, finite_difference, rel_err


def arr(x, grad=False):
    return dc.Array(x, requires_grad=grad)


def dense_log_density_oracle(weights, means, covs, z):
    """Direct evaluation forming each inverse explicitly (test oracle)."""
    z = np.atleast_2d(z)
    terms = []
    for w, mu, cov in zip(weights, means, covs):
        d = len(mu)
        inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        diff = z - mu
        quad = np.einsum("ij,jk,ik->i", diff, inv, diff)
        terms.append(np.log(w) - 0.5 * (d * np.log(2 * np.pi) + logdet + quad))
    terms = np.stack(terms, axis=1)
    m = terms.max(axis=1, keepdims=True)
    return (np.log(np.exp(terms - m).sum(axis=1)) + m[:, 0])


class TestAdapt:
    def test_two_class_arithmetic(self):
        # class 0 = {(0,0),(2,0)}, class 1 = {(5,5)}, ridge 0.1
        z = arr([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
        params = gmm.adapt(z, [0, 0, 1], arr(0.1))
        assert np.allclose(params.means[0].data, [[1.0, 0.0]])
        assert np.allclose(params.covariances[0].data, [[1.1, 0.0], [0.0, 0.1]])
        assert np.allclose(params.means[1].data, [[5.0, 5.0]])
        assert np.allclose(params.covariances[1].data, 0.1 * np.eye(2))
        assert np.allclose(params.class_weights, [2 / 3, 1 / 3])

    def test_single_point_class_is_pure_ridge(self):
        z = arr([[1.0, 2.0], [3.0, -1.0]])
        params = gmm.adapt(z, [0, 1], arr(0.25))
        for cov in params.covariances:
            assert np.allclose(cov.data, 0.25 * np.eye(2))

    def test_large_ridge_goes_spherical(self):
        rng = np.random.default_rng(0)
        z = arr(rng.normal(size=(10, 3)))
        params = gmm.adapt(z, [0] * 5 + [1] * 5, arr(1e6))
        for cov in params.covariances:
            off = cov.data - np.diag(np.diag(cov.data))
            assert np.max(np.abs(off)) / 1e6 < 1e-5
            assert np.allclose(np.diag(cov.data) / 1e6, 1.0, atol=1e-5)

    def test_empty_class_error(self):
        z = arr([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(gmm.AdaptError, match="class 1"):
            gmm.adapt(z, [0, 2], arr(0.1))

    def test_weights_sum_to_one_and_chol_cached(self):
        rng = np.random.default_rng(1)
        z = arr(rng.normal(size=(9, 4)))
        params = gmm.adapt(z, [0, 0, 0, 1, 1, 2, 2, 2, 2], arr(0.5))
        assert np.isclose(params.class_weights.sum(), 1.0)
        for cov, chol in zip(params.covariances, params.chol_factors):
            assert np.max(np.abs(chol.data @ chol.data.T - cov.data)) < 1e-10

    def test_shrinkage_inside_reparameterization(self):
        z = arr([[0.0, 0.0], [2.0, 0.0]])
        params = gmm.adapt(z, [0, 0], arr(0.1), shrinkage_inside=True)
        # (scatter_sum + ridge I) / n with scatter_sum = [[2,0],[0,0]]
        assert np.allclose(params.covariances[0].data, [[1.05, 0.0], [0.0, 0.05]])


class TestLogDensity:
    def test_standard_normal_origin(self):
        z = arr([[0.0, 0.0], [0.0, 0.0]])  # two support points at origin
        params = gmm.adapt(z, [0, 0], arr(1.0))
        out = gmm.log_density(params, arr([[0.0, 0.0]]))
        assert np.isclose(out.data[0], -np.log(2 * np.pi))

    def test_logsumexp_upper_bound(self):
        rng = np.random.default_rng(2)
        z = arr(rng.normal(size=(8, 3)))
        labels = [0, 0, 0, 1, 1, 1, 2, 2]
        params = gmm.adapt(z, labels, arr(0.3))
        q = arr(rng.normal(size=(20, 3)) * 2)
        dens = gmm.log_density(params, q).data
        terms = gmm._class_log_terms(params, q).data
        assert np.all(dens <= terms.max(axis=1) + np.log(params.n_classes) + 1e-12)

    def test_matches_explicit_inverse_oracle(self):
        rng = np.random.default_rng(3)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            n, d = 12, 3
            z = arr(rng.normal(size=(n, d)))
            labels = rng.integers(0, 3, size=n)
            labels[:3] = [0, 1, 2]
            params = gmm.adapt(z, labels, arr(0.4))
            q = rng.normal(size=(7, d))
            got = gmm.log_density(params, arr(q)).data
            want = dense_log_density_oracle(
                params.class_weights,
                [m.data[0] for m in params.means],
                [c.data for c in params.covariances], q)
            assert np.max(np.abs(got - want)) < 1e-8

    def test_score_is_negated_density(self):
        rng = np.random.default_rng(4)
        z = arr(rng.normal(size=(6, 2)))
        params = gmm.adapt(z, [0, 0, 0, 1, 1, 1], arr(0.2))
        q = arr(rng.normal(size=(5, 2)))
        assert np.allclose(gmm.ood_score(params, q).data,
                           -gmm.log_density(params, q).data)

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        sup = rng.normal(size=(8, 3))
        q = rng.normal(size=(6, 3))
        labels = [0, 0, 1, 1, 1, 0, 1, 0]
        shift = np.array([3.0, -7.0, 11.0])
        a = gmm.ood_score(gmm.adapt(arr(sup), labels, arr(0.3)), arr(q)).data
        b = gmm.ood_score(gmm.adapt(arr(sup + shift), labels, arr(0.3)),
                          arr(q + shift)).data
        assert np.max(np.abs(a - b)) < 1e-8

    def test_rotation_invariance(self):
        rng = np.random.default_rng(6)
        sup = rng.normal(size=(9, 4))
        q = rng.normal(size=(5, 4))
        labels = [0, 0, 0, 1, 1, 1, 2, 2, 2]
        rot, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        a = gmm.ood_score(gmm.adapt(arr(sup), labels, arr(0.2)), arr(q)).data
        b = gmm.ood_score(gmm.adapt(arr(sup @ rot), labels, arr(0.2)),
                          arr(q @ rot)).data
        assert np.max(np.abs(a - b)) < 1e-8

    def test_support_scores_lower_than_far_points(self):
        rng = np.random.default_rng(7)
        sup = np.concatenate([rng.normal(size=(5, 2)),
                              rng.normal(size=(5, 2)) + 8.0])
        labels = [0] * 5 + [1] * 5
        params = gmm.adapt(arr(sup), labels, arr(0.1))
        near = gmm.ood_score(params, arr(sup)).data
        far = gmm.ood_score(params, arr(rng.uniform(50, 80, size=(40, 2)))).data
        assert near.mean() < far.min()

    def test_density_integrates_to_one(self):
        # Monte-Carlo integral of exp(log density) over a covering box, D=2
        rng = np.random.default_rng(8)
        sup = np.concatenate([rng.normal(size=(6, 2)),
                              rng.normal(size=(6, 2)) + 3.0])
        params = gmm.adapt(arr(sup), [0] * 6 + [1] * 6, arr(0.2))
        lo, hi = sup.min() - 6.0, sup.max() + 6.0
        n = 400_000
        pts = rng.uniform(lo, hi, size=(n, 2))
        dens = np.exp(gmm.log_density(params, arr(pts)).data)
        integral = dens.mean() * (hi - lo) ** 2
        assert abs(integral - 1.0) < 0.02


class TestWoodbury:
    @pytest.mark.parametrize("d,n_k", [(50, 5), (2, 5), (8, 8), (64, 3), (3, 10)])
    def test_matches_direct_path(self, d, n_k):
        rng = np.random.default_rng(d * 100 + n_k)
        n_way = 3
        sup = rng.normal(size=(n_way * n_k, d))
        labels = np.repeat(np.arange(n_way), n_k)
        q = rng.normal(size=(6, d))
        direct = gmm.log_density(gmm.adapt(arr(sup), labels, arr(0.3)), arr(q)).data
        lowrank = gmm.log_density_woodbury(arr(sup), labels, arr(0.3), arr(q)).data
        assert np.max(np.abs(direct - lowrank)) < 1e-8

    def test_single_point_class_closed_form(self):
        # one support point: isotropic Gaussian with ridge variance
        d = 4
        point = np.ones((1, d))
        q = np.zeros((1, d))
        ridge = 0.5
        got = gmm.log_density_woodbury(arr(point), [0], arr(ridge), arr(q)).data[0]
        want = -0.5 * (d * np.log(2 * np.pi * ridge) + d / ridge)
        assert np.isclose(got, want)

    def test_gradients_agree_with_direct(self):
        rng = np.random.default_rng(9)
        d, n_k = 7, 3
        sup = arr(rng.normal(size=(2 * n_k, d)), grad=True)
        ridge = arr(0.4, grad=True)
        labels = [0] * n_k + [1] * n_k
        q = arr(rng.normal(size=(4, d)))

        with dc.Tape():
            loss_a = dc.reduce_sum(gmm.log_density(gmm.adapt(sup, labels, ridge), q))
        dc.backward(loss_a)
        ga_sup, ga_ridge = sup.grad.copy(), ridge.grad.copy()

        with dc.Tape():
            loss_b = dc.reduce_sum(gmm.log_density_woodbury(sup, labels, ridge, q))
        dc.backward(loss_b)
        assert np.max(np.abs(sup.grad - ga_sup)) < 1e-6
        assert np.max(np.abs(ridge.grad - ga_ridge)) < 1e-6

    def test_prefer_lowrank_rule(self):
        assert gmm.prefer_lowrank(64, [5, 5, 5])
        assert not gmm.prefer_lowrank(4, [5, 5])


class TestVariants:
    def test_shared_cov_pooling_equal_sizes(self):
        rng = np.random.default_rng(10)
        sup = rng.normal(size=(8, 2))
        labels = [0] * 4 + [1] * 4
        rows = [np.arange(4), np.arange(4, 8)]
        means, pooled = gmm._pooled_covariance(arr(sup), labels, arr(0.1), rows)
        per_class = []
        for r in rows:
            c = sup[r] - sup[r].mean(axis=0)
            per_class.append(c.T @ c / len(r))
        want = (per_class[0] + per_class[1]) / 2 + 0.1 * np.eye(2)
        assert np.allclose(pooled.data, want)

    def test_spherical_single_class_at_origin(self):
        sup = arr([[0.0, 0.0], [0.0, 0.0]])
        spec = gmm.VariantSpec(kind="spherical", temperature=1.0)
        score = gmm.variant_score(spec, sup, [0, 0], arr(0.1), arr([[0.0, 0.0]]))
        assert np.isclose(score.data[0], np.log(2 * np.pi))

    def test_kde_single_point_is_isotropic_gaussian(self):
        d = 3
        sup = arr(np.zeros((1, d)))
        spec = gmm.VariantSpec(kind="kde", bandwidth=2.0)
        q = np.array([[1.0, 2.0, -1.0]])
        score = gmm.variant_score(spec, sup, [0], arr(0.1), arr(q))
        want = 0.5 * (d * np.log(2 * np.pi * 4.0) + (q ** 2).sum() / 4.0)
        assert np.isclose(score.data[0], want)

    def test_single_gaussian_ignores_labels(self):
        rng = np.random.default_rng(11)
        sup = arr(rng.normal(size=(6, 2)))
        q = arr(rng.normal(size=(4, 2)))
        spec = gmm.VariantSpec(kind="single_gaussian")
        a = gmm.variant_score(spec, sup, [0, 0, 0, 1, 1, 1], arr(0.2), q).data
        b = gmm.variant_score(spec, sup, [1, 0, 1, 0, 1, 0], arr(0.2), q).data
        assert np.allclose(a, b)

    def test_shared_cov_is_min_mahalanobis(self):
        rng = np.random.default_rng(12)
        sup = rng.normal(size=(8, 2))
        labels = np.array([0] * 4 + [1] * 4)
        q = rng.normal(size=(5, 2))
        spec = gmm.VariantSpec(kind="shared_cov")
        got = gmm.variant_score(spec, arr(sup), labels, arr(0.3), arr(q)).data
        mus = [sup[labels == k].mean(axis=0) for k in (0, 1)]
        sc = sum((sup[labels == k] - mus[k]).T @ (sup[labels == k] - mus[k])
                 for k in (0, 1))
        pooled = sc / 8 + 0.3 * np.eye(2)
        inv = np.linalg.inv(pooled)
        want = np.min(np.stack(
            [np.einsum("ij,jk,ik->i", q - mu, inv, q - mu) for mu in mus], axis=1),
            axis=1)
        assert np.max(np.abs(got - want)) < 1e-8

    def test_all_variants_differentiable(self):
        rng = np.random.default_rng(13)
        sup = dc.Array(rng.normal(size=(6, 3)), requires_grad=True)
        ridge = dc.Array(0.3, requires_grad=True)
        labels = [0, 0, 0, 1, 1, 1]
        q = dc.Array(rng.normal(size=(4, 3)))
        for kind in ("full_gmm", "shared_cov", "spherical", "single_gaussian", "kde"):
            spec = gmm.VariantSpec(kind=kind)
            check_gradients(
                lambda: dc.reduce_sum(gmm.variant_score(spec, sup, labels, ridge, q)),
                [sup, ridge])


class TestClassify:
    def test_query_at_mean_classified(self):
        sup = arr([[0.0, 0.0], [0.2, 0.0], [5.0, 5.0], [5.2, 5.0]])
        labels = [0, 0, 1, 1]
        params = gmm.adapt(sup, labels, arr(0.1))
        pred, post = gmm.classify(params, arr([[0.1, 0.0], [5.1, 5.0]]))
        assert pred.tolist() == [0, 1]

    def test_posterior_sums_to_one(self):
        rng = np.random.default_rng(14)
        sup = arr(rng.normal(size=(9, 3)))
        params = gmm.adapt(sup, [0, 0, 0, 1, 1, 1, 2, 2, 2], arr(0.2))
        _, post = gmm.classify(params, arr(rng.normal(size=(11, 3))))
        assert np.max(np.abs(post.sum(axis=1) - 1.0)) < 1e-12

    def test_identical_classes_tie_break_low_index(self):
        sup = arr([[1.0, 1.0], [-1.0, -1.0], [1.0, 1.0], [-1.0, -1.0]])
        params = gmm.adapt(sup, [0, 0, 1, 1], arr(0.5))
        pred, post = gmm.classify(params, arr([[0.3, -0.2]]))
        assert np.allclose(post[0], [0.5, 0.5])
        assert pred[0] == 0


class TestAdaptOptimality:
    def test_adapted_params_maximize_penalized_support_likelihood(self):
        # the adaptation objective: labeled-mixture log likelihood with the
        # ridge folded into each class scatter; adapt is its exact argmax
        rng = np.random.default_rng(15)
        failures = 0
        for trial in range(10):
            d = int(rng.integers(2, 5))
            n_way = int(rng.integers(2, 4))
            counts = rng.integers(2, 5, size=n_way)
            sup = rng.normal(size=(counts.sum(), d))
            labels = np.repeat(np.arange(n_way), counts)
            ridge = 0.3
            params = gmm.adapt(arr(sup), labels, arr(ridge))

            def objective(weights, means, covs):
                total = 0.0
                for k in range(n_way):
                    rows = sup[labels == k]
                    n_k = len(rows)
                    diff = rows - means[k]
                    jittered = diff.T @ diff / n_k + ridge * np.eye(d)
                    inv = np.linalg.inv(covs[k])
                    _, logdet = np.linalg.slogdet(covs[k])
                    total += n_k * (np.log(weights[k]) - 0.5 * (
                        d * np.log(2 * np.pi) + logdet + np.trace(inv @ jittered)))
                return total

            base = objective(params.class_weights,
                             [m.data[0] for m in params.means],
                             [c.data for c in params.covariances])
            for _ in range(100):
                means = [m.data[0] + 0.05 * rng.normal(size=d) for m in params.means]
                covs = []
                for c in params.covariances:
                    e = 0.05 * rng.normal(size=(d, d))
                    cand = c.data + (e + e.T) / 2
                    w, v = np.linalg.eigh(cand)
                    covs.append((v * np.maximum(w, ridge)) @ v.T)
                wts = params.class_weights + 0.05 * rng.normal(size=n_way)
                wts = np.abs(wts) / np.abs(wts).sum()
                if objective(wts, means, covs) > base + 1e-9:
                    failures += 1
        assert failures == 0


class TestComposedGradient:
    def test_pipeline_gradient_matches_fd(self):
        from metaood import encoder
        rng = np.random.default_rng(16)
        cfg = encoder.EncoderConfig(input_dim=3, hidden_dims=(6,), latent_dim=2,
                                    dropout_rate=0.0)
        params = encoder.init(cfg, seed=1)
        sup_x = dc.Array(rng.normal(size=(6, 3)))
        q_x = dc.Array(rng.normal(size=(5, 3)))
        labels = [0, 0, 0, 1, 1, 1]

        def loss():
            sz = encoder.embed(params, sup_x)
            qz = encoder.embed(params, q_x)
            s_std, q_std, _ = encoder.standardize(sz, qz)
            fitted = gmm.adapt(s_std, labels, params.shrinkage())
            return dc.reduce_mean(gmm.ood_score(fitted, q_std))

        worst = check_gradients(loss, params.parameters())
        assert worst < 1e-4
