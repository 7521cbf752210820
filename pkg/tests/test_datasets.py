import json

import numpy as np
import pytest

from utils.datasets import (
    Dataset,
    dataset_manifest,
    gen_synthetic,
    labeled_quota,
    load_idx_dataset,
    merge_semisup,
    moons_unit_to_native,
    split_semisup,
)
from utils.idx_format import IdxFormatError, serialize_idx
from utils.model import cross_entropy, forward, mlp_init, one_hot, predict
from utils.optimizer import collect_grads, sgd_step
from utils.tensor import backward


class TestSynthetic:
    def test_noiseless_moons_on_arcs(self):
        data = gen_synthetic("two_moons", 400, 0.0, seed=0)
        native = moons_unit_to_native(data.inputs)
        centers = np.array([[0.0, 0.0], [1.0, 0.5]])
        for cls in (0, 1):
            points = native[data.labels == cls]
            np.testing.assert_allclose(np.linalg.norm(points - centers[cls], axis=1), 1.0, atol=1e-12)
        assert np.all(native[data.labels == 0, 1] >= -1e-12)
        assert np.all(native[data.labels == 1, 1] <= 0.5 + 1e-12)

    def test_noiseless_moons_fill_the_unit_square(self):
        inputs = gen_synthetic("two_moons", 2000, 0.0, seed=0).inputs
        np.testing.assert_allclose(inputs.min(axis=0), [0.0, 0.0], atol=0.01)
        np.testing.assert_allclose(inputs.max(axis=0), [1.0, 1.0], atol=0.01)

    def test_moons_are_a_fifth_apart_in_linf(self):
        data = gen_synthetic("two_moons", 600, 0.0, seed=0)
        upper, lower = data.inputs[data.labels == 0], data.inputs[data.labels == 1]
        gaps = np.abs(upper[:, None, :] - lower[None, :, :]).max(axis=2)
        assert 0.19 < gaps.min() < 0.21

    @pytest.mark.parametrize("kind", ["two_moons", "gaussian_blobs", "concentric_circles"])
    def test_deterministic_and_in_unit_square(self, kind):
        a = gen_synthetic(kind, 301, 0.05, seed=4)
        b = gen_synthetic(kind, 301, 0.05, seed=4)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)
        assert np.all((a.inputs >= 0.0) & (a.inputs <= 1.0))
        assert np.bincount(a.labels).tolist() == [151, 150]

    def test_seed_changes_data(self):
        assert not np.array_equal(gen_synthetic("two_moons", 50, 0.03, 0).inputs, gen_synthetic("two_moons", 50, 0.03, 1).inputs)

    def test_circle_radii(self):
        data = gen_synthetic("concentric_circles", 100, 0.0, seed=0)
        radii = np.linalg.norm(data.inputs - 0.5, axis=1)
        np.testing.assert_allclose(radii[data.labels == 0], 0.15, atol=1e-12)
        np.testing.assert_allclose(radii[data.labels == 1], 0.35, atol=1e-12)

    def test_blobs_are_linearly_separable(self):
        data = gen_synthetic("gaussian_blobs", 400, 0.02, seed=0)
        model = mlp_init([2, 2], seed=0)
        targets = one_hot(data.labels, 2)
        for _ in range(200):
            trainable = model.trainable()
            loss = cross_entropy(forward(trainable, data.inputs), targets)
            model, _ = sgd_step(trainable, collect_grads(backward(loss), trainable), lr=2.0)
        assert np.mean(predict(model, data.inputs) == data.labels) >= 0.99

    @pytest.mark.parametrize("kwargs", [
        {"kind": "spirals", "n_points": 10, "noise_sigma": 0.0},
        {"kind": "two_moons", "n_points": 1, "noise_sigma": 0.0},
        {"kind": "two_moons", "n_points": 10, "noise_sigma": -0.1},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            gen_synthetic(seed=0, **kwargs)


class TestSplit:
    def test_stratified_counts(self):
        data = gen_synthetic("two_moons", 1000, 0.03, seed=0)
        labeled, unlabeled = split_semisup(data, 0.08, seed=0)
        assert np.bincount(labeled.labels).tolist() == [40, 40]
        assert unlabeled.size == 920
        assert unlabeled.labels is None

    def test_full_fraction(self, moons):
        labeled, unlabeled = split_semisup(moons, 1.0, seed=0)
        assert labeled.size == moons.size
        assert unlabeled.size == 0

    def test_partition(self, moons):
        labeled, unlabeled = split_semisup(moons, 0.1, seed=3)
        rows = np.concatenate([labeled.inputs, unlabeled.inputs])
        assert rows.shape == moons.inputs.shape
        assert {tuple(r) for r in rows} == {tuple(r) for r in moons.inputs}
        truth = np.concatenate([labeled.labels, unlabeled.sealed_labels])
        assert np.bincount(truth).tolist() == np.bincount(moons.labels).tolist()

    def test_same_seed_same_split(self, moons):
        a, _ = split_semisup(moons, 0.1, seed=5)
        b, _ = split_semisup(moons, 0.1, seed=5)
        assert a.inputs.tobytes() == b.inputs.tobytes()

    def test_zero_labels_for_a_class(self, moons):
        with pytest.raises(ValueError, match="without labeled"):
            split_semisup(moons, 0.004, seed=0)

    @pytest.mark.parametrize("fraction", [0.0, 1.2])
    def test_fraction_range(self, moons, fraction):
        with pytest.raises(ValueError):
            split_semisup(moons, fraction, seed=0)

    def test_quota_remainder_goes_to_low_classes(self):
        assert labeled_quota(np.array([10, 10, 10]), 0.5).tolist() == [5, 5, 5]
        assert labeled_quota(np.array([100, 100, 100]), 0.05).tolist() == [5, 5, 5]
        assert labeled_quota(np.array([10, 10, 10]), 0.35).tolist() == [4, 4, 3]


class TestDataset:
    def test_sealed_labels_only_through_evaluation(self, moons_split):
        labeled, unlabeled = moons_split
        merged = merge_semisup(labeled, unlabeled)
        assert merged.num_labeled == labeled.size
        assert merged.labeled_mask.sum() == labeled.size
        assert merged.evaluation_labels().shape == (merged.size,)
        with pytest.raises(ValueError, match="pseudo-labels"):
            merged.training_targets()

    def test_training_targets(self, moons_split):
        labeled, unlabeled = moons_split
        merged = merge_semisup(labeled, unlabeled)
        soft = np.full((merged.size, 2), 0.5)
        merged = Dataset(merged.inputs, merged.labels, 2, pseudo_labels=soft, sealed_labels=merged.sealed_labels)
        targets = merged.training_targets()
        np.testing.assert_array_equal(targets[: labeled.size], one_hot(labeled.labels, 2))
        np.testing.assert_array_equal(targets[labeled.size :], 0.5)

    def test_invalid_pseudo_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), None, 2, pseudo_labels=[[0.7, 0.7], [0.5, 0.5]])

    def test_labels_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 2], 2)

    def test_subset(self, moons):
        part = moons.subset(10)
        assert part.size == 10
        np.testing.assert_array_equal(part.labels, moons.labels[:10])

    def test_manifest(self, moons_split):
        labeled, unlabeled = moons_split
        manifest = dataset_manifest("two_moons", {"noise": 0.03}, 0, labeled, unlabeled)
        assert manifest["split"] == {"labeled": 20, "unlabeled": 180, "labeled_per_class": [10, 10]}
        json.dumps(manifest)


class TestIdxDataset:
    def test_load_pairs_images_and_labels(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(5, 4, 4)) / 255.0
        (tmp_path / "images.idx").write_bytes(serialize_idx(images, dtype="u8"))
        (tmp_path / "labels.idx").write_bytes(serialize_idx(np.array([0, 1, 2, 1, 0]), dtype="u8", normalize=False))

        data = load_idx_dataset(tmp_path / "images.idx", tmp_path / "labels.idx")

        assert data.inputs.shape == (5, 16)
        assert data.image_shape == (4, 4)
        assert data.num_classes == 3
        assert data.domain_bounds == (0.0, 1.0)
        np.testing.assert_allclose(data.inputs, images.reshape(5, 16))

    def test_limit(self, tmp_path):
        (tmp_path / "images.idx").write_bytes(serialize_idx(np.zeros((6, 2, 2)), dtype="u8"))
        (tmp_path / "labels.idx").write_bytes(serialize_idx(np.arange(6) % 2, dtype="u8", normalize=False))
        assert load_idx_dataset(tmp_path / "images.idx", tmp_path / "labels.idx", limit=4).size == 4

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "images.idx").write_bytes(serialize_idx(np.zeros((3, 2, 2)), dtype="u8"))
        (tmp_path / "labels.idx").write_bytes(serialize_idx(np.zeros(2), dtype="u8", normalize=False))
        with pytest.raises(IdxFormatError):
            load_idx_dataset(tmp_path / "images.idx", tmp_path / "labels.idx")
