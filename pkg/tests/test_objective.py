import numpy as np
import pytest

from metaood import diffcore as dc
from metaood import encoder, gmm, objective
from metaood.episodes import Episode
from helpers import check_gradients


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestExactAuc:
    def test_perfect_separation(self):
        assert objective.exact_auc([3, 4], [1, 2]) == 1.0

    def test_all_equal_is_half(self):
        assert objective.exact_auc([5, 5, 5], [5, 5]) == 0.5

    def test_pairwise_enumeration_example(self):
        # OoD {2} vs ID {1, 3}: one win, one loss
        assert objective.exact_auc([2], [1, 3]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            objective.exact_auc([], [1.0])

    def test_strict_mode(self):
        assert objective.exact_auc([1.0], [1.0], ties="strict") == 0.0
        assert objective.exact_auc([1.0], [1.0], ties="half") == 0.5

    def test_matches_bruteforce_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n_o = int(rng.integers(1, 12))
            n_i = int(rng.integers(1, 12))
            # coarse grid forces plenty of ties
            ood = rng.integers(0, 4, size=n_o).astype(float)
            idd = rng.integers(0, 4, size=n_i).astype(float)
            for ties in ("half", "strict"):
                fast = objective.exact_auc(ood, idd, ties=ties)
                slow = objective.exact_auc_pairwise(ood, idd, ties=ties)
                assert abs(fast - slow) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        ood = rng.normal(size=10)
        idd = rng.normal(size=8)
        base = objective.exact_auc(ood, idd)
        for f in (lambda x: 3 * x + 7, np.exp, lambda x: x ** 3):
            assert objective.exact_auc(f(ood), f(idd)) == pytest.approx(base)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ood = rng.integers(0, 5, size=6).astype(float)
            idd = rng.integers(0, 5, size=9).astype(float)
            a = objective.exact_auc(ood, idd)
            b = objective.exact_auc(idd, ood)
            assert a + b == pytest.approx(1.0)


class TestSmoothAuc:
    def test_sigmoid_arithmetic_example(self):
        out = objective.smooth_auc(dc.Array([2.0]), dc.Array([1.0, 3.0]))
        want = (sigmoid(1.0) + sigmoid(-1.0)) / 2.0
        assert out.item() == pytest.approx(want)
        assert out.item() == pytest.approx(0.5)

    def test_all_equal_exactly_half(self):
        out = objective.smooth_auc(dc.Array([1.0, 1.0]), dc.Array([1.0, 1.0, 1.0]))
        assert out.item() == 0.5

    def test_saturation_approaches_exact(self):
        ood = np.array([2.0, 3.0])
        idd = np.array([0.0, 1.0])  # min gap 1, exact AUC 1
        for alpha, tol in ((10.0, 1e-4), (100.0, 1e-10)):
            out = objective.smooth_auc(dc.Array(alpha * ood), dc.Array(alpha * idd))
            assert abs(out.item() - 1.0) < tol

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        ood = rng.normal(size=7)
        idd = rng.normal(size=5)
        base = objective.smooth_auc(dc.Array(ood), dc.Array(idd)).item()
        for c in (-100.0, 0.37, 55.0):
            shifted = objective.smooth_auc(dc.Array(ood + c), dc.Array(idd + c)).item()
            assert abs(shifted - base) < 1e-12

    def test_monotone_convergence_to_exact(self):
        rng = np.random.default_rng(4)
        ood = rng.normal(size=6) + 2.0
        idd = rng.normal(size=6)
        exact = objective.exact_auc(ood, idd)
        errs = []
        for alpha in (1.0, 10.0, 100.0):
            s = objective.smooth_auc(dc.Array(alpha * ood), dc.Array(alpha * idd))
            errs.append(abs(s.item() - exact))
        assert errs[0] >= errs[1] >= errs[2]

    def test_gradients_flow_to_both_sets(self):
        ood = dc.Array([1.0, 0.5], requires_grad=True)
        idd = dc.Array([0.2, 0.9, 0.4], requires_grad=True)
        check_gradients(lambda: objective.smooth_auc(ood, idd), [ood, idd])


def tiny_episode(seed=0, n_way=2, per_class=3, n_id=4, n_ood=5, dim=3):
    rng = np.random.default_rng(seed)
    sup = np.concatenate([rng.normal(size=(per_class, dim)) + 4 * k
                          for k in range(n_way)])
    return Episode(
        support_x=sup,
        support_y=np.repeat(np.arange(n_way), per_class),
        query_id_x=rng.normal(size=(n_id, dim)),
        query_id_y=rng.integers(0, n_way, size=n_id),
        query_ood_x=rng.normal(size=(n_ood, dim)) + 5.0,
        n_way=n_way,
        task_id=0,
        class_ids=np.arange(n_way),
        support_rows=np.arange(len(sup)),
        query_id_rows=np.arange(n_id),
        query_ood_rows=np.arange(n_ood),
    )


def tiny_params(dim=3, latent=2, seed=0):
    cfg = encoder.EncoderConfig(input_dim=dim, hidden_dims=(5,), latent_dim=latent,
                                dropout_rate=0.0)
    return encoder.init(cfg, seed=seed)


class TestMetaObjective:
    def test_auc_loss_in_open_interval(self):
        for seed in range(5):
            ep = tiny_episode(seed=seed)
            params = tiny_params(seed=seed)
            loss = objective.meta_objective("auc", ep, params,
                                            gmm.VariantSpec(), train_mode=False)
            assert -1.0 < loss.item() < 0.0

    def test_cross_entropy_single_class_zero(self):
        ep = tiny_episode(n_way=1, per_class=4)
        params = tiny_params()
        loss = objective.meta_objective("cross_entropy", ep, params,
                                        gmm.VariantSpec(), train_mode=False)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_wrt_log_shrinkage_nonzero(self):
        ep = tiny_episode(seed=7)
        params = tiny_params(seed=7)
        with dc.Tape():
            loss = objective.meta_objective("auc", ep, params, gmm.VariantSpec(),
                                            train_mode=False)
        dc.backward(loss, leaves=params.parameters())
        assert abs(params.log_shrinkage.grad) > 1e-8
        check_gradients(
            lambda: objective.meta_objective("auc", ep, params, gmm.VariantSpec(),
                                             train_mode=False),
            [params.log_shrinkage])

    def test_cross_entropy_never_reads_ood(self):
        ep = tiny_episode(seed=3)
        touched = []

        class Instrumented(Episode):
            @property
            def query_ood_x(self):
                touched.append(True)
                return self._ood

            @query_ood_x.setter
            def query_ood_x(self, v):
                self._ood = v

        watched = Instrumented(**{f: getattr(ep, f) for f in ep.__dataclass_fields__})
        params = tiny_params()
        objective.meta_objective("cross_entropy", watched, params,
                                 gmm.VariantSpec(), train_mode=False)
        assert touched == []
        objective.meta_objective("auc", watched, params,
                                 gmm.VariantSpec(), train_mode=False)
        assert touched  # sanity: the auc path does read it

    def test_unlabeled_variant_rejected_for_ce(self):
        ep = tiny_episode()
        params = tiny_params()
        with pytest.raises(ValueError, match="class-aware"):
            objective.meta_objective("cross_entropy", ep, params,
                                     gmm.VariantSpec(kind="kde"), train_mode=False)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown objective"):
            objective.meta_objective("mse", tiny_episode(), tiny_params(),
                                     gmm.VariantSpec())

    def test_lowrank_and_direct_paths_agree(self):
        ep = tiny_episode(seed=9, dim=4)
        params = tiny_params(dim=4, latent=6, seed=1)  # latent > class size
        kw = dict(train_mode=False)
        id_a, ood_a = objective.episode_scores(ep, params, gmm.VariantSpec(),
                                               use_lowrank=True, **kw)
        id_b, ood_b = objective.episode_scores(ep, params, gmm.VariantSpec(),
                                               use_lowrank=False, **kw)
        assert np.max(np.abs(id_a.data - id_b.data)) < 1e-8
        assert np.max(np.abs(ood_a.data - ood_b.data)) < 1e-8
