import numpy as np
import pytest

from agents.teacher_agent import TeacherAgent, TeacherConfig, _shift_image, assign_pseudo_labels, augment, train_teacher
from tests.conftest import linear_model
from utils.datasets import Dataset, merge_semisup


class TestTeacherConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"confidence_threshold": 1.0},
            {"confidence_threshold": 0.0},
            {"unsup_weight": -1.0},
            {"weak_noise": 0.1, "strong_noise": 0.05},
            {"labeled_batch_size": 0},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TeacherConfig(**kwargs)


class TestAugment:
    def test_shift_moves_pixels_with_zero_fill(self):
        image = np.zeros((4, 4))
        image[0, 0] = 1.0
        shifted = _shift_image(image, 1, 2)
        assert shifted[1, 2] == 1.0
        assert shifted.sum() == 1.0
        assert _shift_image(image, -1, 0).sum() == 0.0

    def test_noise_is_clipped_to_bounds(self, rng):
        out = augment(np.full((50, 2), 0.99), rng, noise=0.5, bounds=(0.0, 1.0))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_images_are_translated(self, rng):
        x = np.zeros((3, 16))
        x[:, 5] = 1.0
        out = augment(x, rng, noise=0.0, image_shape=(4, 4), max_shift=1)
        assert out.shape == x.shape
        assert np.all(out.sum(axis=1) <= 1.0)

    def test_zero_noise_copies(self, rng):
        x = np.ones((2, 2))
        out = augment(x, rng, noise=0.0)
        out[0, 0] = 5.0
        assert x[0, 0] == 1.0


class TestTrainTeacher:
    def test_needs_labeled_rows(self, moons_split):
        _, unlabeled = moons_split
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
        with pytest.raises(ValueError, match="at least one labeled"):
            train_teacher((empty, unlabeled), TeacherConfig(epochs=1), seed=0)

    def test_impossible_threshold_matches_zero_unsup_weight(self, moons_split):
        never_confident = train_teacher(moons_split, TeacherConfig(epochs=2, confidence_threshold=1 - 1e-9, hidden=[8]), seed=3)
        supervised_only = train_teacher(moons_split, TeacherConfig(epochs=2, unsup_weight=0.0, hidden=[8]), seed=3)
        for a, b in zip(never_confident.parameter_arrays(), supervised_only.parameter_arrays()):
            assert a.tobytes() == b.tobytes()

    def test_same_seed_same_teacher(self, moons_split):
        cfg = TeacherConfig(epochs=1, hidden=[8])
        a = train_teacher(moons_split, cfg, seed=1)
        b = train_teacher(moons_split, cfg, seed=1)
        assert all(np.array_equal(p, q) for p, q in zip(a.parameter_arrays(), b.parameter_arrays()))


class TestPseudoLabels:
    def test_uniform_logits_give_half_half(self, moons_split):
        merged = merge_semisup(*moons_split)
        labels = assign_pseudo_labels(linear_model(np.zeros((2, 2))), merged)

        assert labels.shape == (merged.size, 2)
        np.testing.assert_allclose(labels.sum(axis=1), 1.0)
        np.testing.assert_allclose(labels[merged.num_labeled :], 0.5)
        np.testing.assert_array_equal(labels[: merged.num_labeled].argmax(axis=1), merged.labels)
        assert set(np.unique(labels[: merged.num_labeled])) == {0.0, 1.0}


class TestTeacherAgent:
    def test_run_labels_the_merged_set(self, moons_split):
        labeled, unlabeled = moons_split
        result = TeacherAgent(TeacherConfig(epochs=20, hidden=[16])).run(labeled, unlabeled, seed=0)

        assert result["status"] == "success"
        data = result["data"]
        assert data.size == labeled.size + unlabeled.size
        assert data.pseudo_labels.shape == (data.size, 2)
        assert 0.6 < result["pseudo_label_accuracy"] <= 1.0

    def test_run_reports_errors(self, moons_split):
        _, unlabeled = moons_split
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
        result = TeacherAgent(TeacherConfig(epochs=1)).run(empty, unlabeled, seed=0)
        assert result == {"status": "error", "phase": "teacher", "error": "Teacher training needs at least one labeled example"}
