import numpy as np
import pytest

from metaood import synth
from metaood.episodes import EpisodeSpec, fixed_eval_episodes


def tiny_spec(**kw):
    base = dict(n_tasks=2, classes_per_task=3, points_per_class=50,
                signal_dim=2, noise_dim=0, warp_scale=0.0)
    base.update(kw)
    return synth.GeneratorSpec(**base)


class TestGenerator:
    def test_row_count(self):
        spec = tiny_spec()
        data, _ = synth.synth_tasks(spec, seed=0)
        assert data.n == 2 * 3 * 50
        assert data.input_dim == 2

    def test_seed_determinism(self):
        spec = tiny_spec()
        a, _ = synth.synth_tasks(spec, seed=5)
        b, _ = synth.synth_tasks(spec, seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.class_labels, b.class_labels)
        assert a.split_by_task == b.split_by_task

    def test_sample_mean_near_true_mean(self):
        # identity warp, unit-scale covariances: law of large numbers bound
        spec = tiny_spec(points_per_class=200, cov_eigenvalues=(1.0, 1.0))
        data, truth = synth.synth_tasks(spec, seed=1)
        for cls, entry in truth.classes.items():
            rows = data.rows_of_class(cls)
            sample_mean = data.features[rows].mean(axis=0)
            bound = 3.0 / np.sqrt(len(rows))  # 3 sigma / sqrt(n), sigma = 1
            assert np.all(np.abs(sample_mean - entry.mean) < 3 * bound)

    def test_mean_separation_respected(self):
        spec = tiny_spec(n_tasks=4, mean_separation=6.0)
        _, truth = synth.synth_tasks(spec, seed=2)
        means = np.stack([c.mean for c in truth.classes.values()])
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                assert np.linalg.norm(means[i] - means[j]) >= 6.0 - 1e-9

    def test_split_counts_follow_fractions(self):
        spec = tiny_spec(n_tasks=10)
        data, _ = synth.synth_tasks(spec, seed=3)
        counts = {s: sum(1 for v in data.split_by_task.values() if v == s)
                  for s in ("train", "val", "test")}
        assert counts == {"train": 6, "val": 2, "test": 2}


class TestWarp:
    def test_exact_inverse(self):
        rng = np.random.default_rng(0)
        warp = synth.CouplingWarp.random(dim=5, n_layers=3, hidden=8, scale=2.0,
                                         rng=rng)
        x = rng.normal(size=(40, 5)) * 4.0
        back = warp.inverse(warp.forward(x))
        assert np.max(np.abs(back - x)) < 1e-12

    def test_zero_layers_is_identity(self):
        warp = synth.CouplingWarp(3, [])
        x = np.random.default_rng(1).normal(size=(7, 3))
        assert np.array_equal(warp.forward(x), x)

    def test_json_roundtrip(self):
        rng = np.random.default_rng(3)
        warp = synth.CouplingWarp.random(dim=4, n_layers=2, hidden=6, scale=1.0,
                                         rng=rng)
        clone = synth.CouplingWarp.from_json(warp.to_json())
        x = rng.normal(size=(10, 4))
        assert np.allclose(warp.forward(x), clone.forward(x))


class TestGroundTruth:
    def test_json_roundtrip_scores(self, tmp_path):
        spec = tiny_spec(noise_dim=2, warp_scale=1.0)
        data, truth = synth.synth_tasks(spec, seed=4)
        path = tmp_path / "truth.json"
        truth.save(path)
        clone = synth.GroundTruth.load(path)
        x = data.features[:25]
        cls = list(truth.classes)[:3]
        assert np.allclose(truth.oracle_scores(x, cls), clone.oracle_scores(x, cls))

    def test_oracle_separates_well_separated_tasks(self):
        spec = synth.GeneratorSpec(n_tasks=6, classes_per_task=3,
                                   points_per_class=30, signal_dim=2,
                                   noise_dim=2, noise_scale=5.0,
                                   mean_separation=8.0, warp_scale=1.0)
        data, truth = synth.synth_tasks(spec, seed=6)
        spec_ep = EpisodeSpec(n_way=3, support_per_class=5, id_query_per_class=5,
                              ood_query_total=15)
        aucs = []
        for e in fixed_eval_episodes(data, spec_ep, 16, seed=0, split="train"):
            s_id = truth.oracle_scores(e.query_id_x, e.class_ids)
            s_ood = truth.oracle_scores(e.query_ood_x, e.class_ids)
            aucs.append(np.mean(s_ood[:, None] > s_id[None, :]))
        assert np.mean(aucs) > 0.95
