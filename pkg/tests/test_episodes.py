import numpy as np
import pytest

from metaood import episodes as ep


def toy_dataset(n_tasks=3, classes_per_task=4, per_class=12, dim=2, seed=0,
                splits=None):
    rng = np.random.default_rng(seed)
    feats, labels, tasks = [], [], []
    for t in range(n_tasks):
        for j in range(classes_per_task):
            cls = t * classes_per_task + j
            feats.append(rng.normal(size=(per_class, dim)) + 10 * cls)
            labels.extend([cls] * per_class)
            tasks.extend([t] * per_class)
    if splits is None:
        splits = {t: "train" for t in range(n_tasks)}
    return ep.TaskDataset(
        features=np.concatenate(feats),
        class_labels=np.asarray(labels),
        task_ids=np.asarray(tasks),
        split_by_task=splits,
    )


class TestTaskDataset:
    def test_rejects_cross_task_class(self):
        with pytest.raises(ep.DatasetError):
            ep.TaskDataset(
                features=np.zeros((4, 2)),
                class_labels=np.array([0, 1, 0, 1]),
                task_ids=np.array([0, 0, 1, 1]),
                split_by_task={0: "train", 1: "train"},
            )

    def test_rejects_single_class_task(self):
        with pytest.raises(ep.DatasetError):
            ep.TaskDataset(
                features=np.zeros((4, 2)),
                class_labels=np.array([0, 0, 1, 2]),
                task_ids=np.array([0, 0, 1, 1]),
                split_by_task={0: "train", 1: "train"},
            )

    def test_rejects_missing_split(self):
        with pytest.raises(ep.DatasetError):
            toy_dataset(splits={0: "train"})

    def test_lookup_caches(self):
        data = toy_dataset()
        assert data.tasks_in_split("train") == [0, 1, 2]
        assert data.classes_of_task(1) == [4, 5, 6, 7]
        assert len(data.rows_of_class(5)) == 12


class TestSampleEpisode:
    SPEC = ep.EpisodeSpec(n_way=2, support_per_class=3, id_query_per_class=2,
                          ood_query_total=5)

    def test_paper_protocol_sizes(self):
        data = toy_dataset(n_tasks=3, classes_per_task=6, per_class=15)
        spec = ep.EpisodeSpec(n_way=5, support_per_class=5, id_query_per_class=5,
                              ood_query_total=25)
        e = ep.sample_episode(data, spec, np.random.default_rng(0))
        assert len(e.support_x) == 25
        assert len(e.query_id_x) == 25
        assert len(e.query_ood_x) == 25

    def test_deterministic_given_seed(self):
        data = toy_dataset()
        a = ep.sample_episode(data, self.SPEC, np.random.default_rng(42))
        b = ep.sample_episode(data, self.SPEC, np.random.default_rng(42))
        assert np.array_equal(a.support_rows, b.support_rows)
        assert np.array_equal(a.query_id_rows, b.query_id_rows)
        assert np.array_equal(a.query_ood_rows, b.query_ood_rows)

    def test_single_task_errors(self):
        data = toy_dataset(n_tasks=1)
        with pytest.raises(ep.SamplingError):
            ep.sample_episode(data, self.SPEC, np.random.default_rng(0))

    def test_unsatisfiable_spec_names_constraint(self):
        data = toy_dataset(per_class=4)
        spec = ep.EpisodeSpec(n_way=2, support_per_class=3, id_query_per_class=3,
                              ood_query_total=5)
        with pytest.raises(ep.SamplingError, match="classes with"):
            ep.sample_episode(data, spec, np.random.default_rng(0))

    def test_no_support_query_overlap_10k(self):
        data = toy_dataset(n_tasks=2, classes_per_task=3, per_class=8)
        spec = ep.EpisodeSpec(n_way=2, support_per_class=3, id_query_per_class=3,
                              ood_query_total=4)
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            e = ep.sample_episode(data, spec, rng)
            assert not set(e.support_rows) & set(e.query_id_rows)

    def test_ood_from_other_tasks_only(self):
        data = toy_dataset()
        rng = np.random.default_rng(3)
        for _ in range(50):
            e = ep.sample_episode(data, self.SPEC, rng)
            ood_tasks = set(data.task_ids[e.query_ood_rows].tolist())
            assert e.task_id not in ood_tasks
            # class-level disjointness between support and OoD sources
            sup_classes = set(data.class_labels[e.support_rows].tolist())
            ood_classes = set(data.class_labels[e.query_ood_rows].tolist())
            assert not sup_classes & ood_classes

    def test_every_class_index_covered(self):
        data = toy_dataset()
        e = ep.sample_episode(data, self.SPEC, np.random.default_rng(5))
        for k in range(self.SPEC.n_way):
            assert np.sum(e.support_y == k) == self.SPEC.support_per_class
            assert np.sum(e.query_id_y == k) == self.SPEC.id_query_per_class

    def test_single_class_ood_mode(self):
        data = toy_dataset()
        spec = ep.EpisodeSpec(n_way=2, support_per_class=3, id_query_per_class=2,
                              ood_query_total=5, ood_mode="single_class")
        rng = np.random.default_rng(11)
        for _ in range(20):
            e = ep.sample_episode(data, spec, rng)
            ood_classes = set(data.class_labels[e.query_ood_rows].tolist())
            assert len(ood_classes) == 1
            src_task = data.task_ids[e.query_ood_rows[0]]
            assert src_task != e.task_id


class TestFixedEvalEpisodes:
    def test_count_and_reproducibility(self):
        splits = {0: "train", 1: "val", 2: "val", 3: "test", 4: "test"}
        data = toy_dataset(n_tasks=5, splits=splits)
        spec = ep.EpisodeSpec(n_way=2, support_per_class=3, id_query_per_class=2,
                              ood_query_total=5)
        a = ep.fixed_eval_episodes(data, spec, 64, seed=9, split="val")
        b = ep.fixed_eval_episodes(data, spec, 64, seed=9, split="val")
        assert len(a) == 64
        for x, y in zip(a, b):
            assert np.array_equal(x.support_rows, y.support_rows)
            assert np.array_equal(x.query_ood_rows, y.query_ood_rows)

    def test_split_isolation(self):
        splits = {0: "train", 1: "train", 2: "test", 3: "test"}
        data = toy_dataset(n_tasks=4, splits=splits)
        spec = ep.EpisodeSpec(n_way=2, support_per_class=3, id_query_per_class=2,
                              ood_query_total=5)
        train_rows = set(np.flatnonzero(np.isin(data.task_ids, [0, 1])).tolist())
        for e in ep.fixed_eval_episodes(data, spec, 30, seed=1, split="test"):
            used = set(e.support_rows) | set(e.query_id_rows) | set(e.query_ood_rows)
            assert not used & train_rows


class TestEpdsIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(20, 3)).astype(np.float32)
        labels = np.repeat([0, 1, 2, 3], 5)
        tasks = np.repeat([0, 0, 1, 1], 5)
        path = tmp_path / "d.epds"
        manifest = ep.save_epds(path, feats, labels, tasks,
                                {0: "train", 1: "train"})
        data = ep.load_epds(path)
        assert np.array_equal(data.features.astype(np.float32), feats)
        assert np.array_equal(data.class_labels, labels)
        assert np.array_equal(data.task_ids, tasks)
        assert ep.feature_checksum(data.features) == manifest["feature_sha256"]

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "d.epds"
        ep.save_epds(path, np.zeros((4, 2), np.float32), [0, 0, 1, 1],
                     [0, 0, 1, 1], {0: "train", 1: "train"})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(ep.DatasetError, match="size"):
            ep.load_epds(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.epds"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        (tmp_path / "d.manifest.json").write_text("{}")
        with pytest.raises(ep.DatasetError, match="magic"):
            ep.load_epds(path)

    def test_missing_paths(self, tmp_path):
        with pytest.raises(ep.DatasetError, match="not found"):
            ep.load_epds(tmp_path / "absent.epds")
