import struct

import numpy as np
import pytest

from tests.conftest import linear_model
from utils.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    cross_entropy,
    decode_checkpoint,
    encode_checkpoint,
    entropy,
    forward,
    kl_divergence,
    load_checkpoint,
    mlp_init,
    predict,
    save_checkpoint,
    score,
    validate_soft_labels,
)
from utils.tensor import ShapeError, Tensor, backward, finite_difference_grad, relative_error


class TestInit:
    def test_deterministic(self):
        a, b = mlp_init([2, 8, 2], seed=3), mlp_init([2, 8, 2], seed=3)
        for p, q in zip(a.params, b.params):
            assert p.data.tobytes() == q.data.tobytes()

    def test_parameter_count(self):
        assert mlp_init([2, 8, 2], seed=0).num_parameters == 42

    def test_zero_biases(self):
        model = mlp_init([3, 5, 4, 2], seed=1)
        for bias in model.params[1::2]:
            assert not np.any(bias.data)

    def test_he_uniform_bounds(self):
        model = mlp_init([6, 10, 2], seed=0)
        assert np.max(np.abs(model.params[0].data)) <= np.sqrt(6.0 / 6)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            mlp_init([2], seed=0)


class TestForward:
    def test_zero_weights(self):
        model = linear_model(np.zeros((2, 3)))
        np.testing.assert_array_equal(forward(model, np.ones((4, 2))).data, np.zeros((4, 3)))

    def test_affine(self, rng):
        w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
        x = rng.standard_normal((5, 3))
        np.testing.assert_allclose(forward(linear_model(w, b), x).data, x @ w + b)

    def test_batch_independence(self, small_model, rng):
        x = rng.uniform(size=(6, 2))
        batch = forward(small_model, x).data
        for i in range(6):
            np.testing.assert_allclose(forward(small_model, x[i]).data[0], batch[i])

    def test_width_mismatch(self, small_model):
        with pytest.raises(ShapeError):
            forward(small_model, np.ones((2, 3)))

    def test_predict_ties_lowest(self):
        assert predict(linear_model(np.zeros((2, 3))), np.ones((1, 2)))[0] == 0


class TestScore:
    def test_uniform(self):
        np.testing.assert_allclose(score(Tensor([[0.0, 0.0, 0.0]]), tau=3.7).data, [[1 / 3] * 3])

    def test_closed_form(self):
        np.testing.assert_allclose(score(Tensor([[np.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]])

    def test_temperature_smooths(self):
        logits = Tensor([[2.0, 1.0, 0.0]])
        assert entropy(score(logits, 10.0).data)[0] > entropy(score(logits, 1.0).data)[0]

    def test_large_logits_stay_valid(self):
        probs = score(Tensor([[1e4, -1e4, 0.0]]), tau=0.5).data
        validate_soft_labels(probs)
        assert np.all(np.isfinite(probs))

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            score(Tensor([[0.0, 1.0]]), tau=0.0)


class TestCrossEntropy:
    def test_closed_form(self):
        loss = cross_entropy(Tensor([[np.log(2.0), 0.0]]), [[1.0, 0.0]])
        assert loss.item() == pytest.approx(np.log(1.5), abs=1e-12)

    def test_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((1, 4))), np.full((1, 4), 0.25))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_smoothing_definition(self, rng):
        logits = Tensor(rng.standard_normal((1, 2)))
        smoothed = cross_entropy(logits, [[1.0, 0.0]], smoothing=0.1).item()
        assert smoothed == pytest.approx(cross_entropy(logits, [[0.95, 0.05]]).item(), abs=1e-12)

    def test_kl_plus_entropy_identity(self, rng):
        logits = Tensor(rng.standard_normal((5, 3)))
        target = rng.dirichlet(np.ones(3), size=5)
        ce = cross_entropy(logits, target, reduction="none").data
        kl = kl_divergence(target, score(logits), reduction="none").data
        np.testing.assert_allclose(ce, kl + entropy(target), atol=1e-9)

    def test_rejects_invalid_target(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([[0.0, 0.0]]), [[0.7, 0.7]])

    def test_rejects_bad_smoothing(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([[0.0, 0.0]]), [[1.0, 0.0]], smoothing=1.0)


class TestKl:
    def test_identity(self, rng):
        p = rng.dirichlet(np.ones(4), size=3)
        assert kl_divergence(p, p).item() == pytest.approx(0.0, abs=1e-15)

    def test_closed_forms(self):
        assert kl_divergence([[1.0, 0.0]], [[0.5, 0.5]]).item() == pytest.approx(np.log(2.0))
        expected = 0.5 * np.log(2 / 3) + 0.5 * np.log(2.0)
        assert kl_divergence([[0.5, 0.5]], [[0.75, 0.25]]).item() == pytest.approx(expected)

    def test_non_negative(self, rng):
        p = rng.dirichlet(np.ones(3), size=200)
        q = rng.dirichlet(np.ones(3), size=200)
        assert np.all(kl_divergence(p, q, reduction="none").data >= -1e-15)

    def test_zero_in_q_stays_finite(self):
        assert np.isfinite(kl_divergence([[0.5, 0.5]], [[1.0, 0.0]]).item())


def test_loss_gradients_match_finite_differences(rng):
    target = rng.dirichlet(np.ones(3), size=4)
    reference = rng.dirichlet(np.ones(3), size=4)
    x = rng.standard_normal((4, 3))
    for loss in (
        lambda t: cross_entropy(t, target, smoothing=0.2),
        lambda t: kl_divergence(reference, score(t, 2.0)),
        lambda t: (score(t, 0.7) * Tensor(target)).sum(),
    ):
        variable = Tensor(x, requires_grad=True)
        analytic = backward(loss(variable))[variable].data
        numeric = finite_difference_grad(loss, Tensor(x)).data
        assert relative_error(analytic, numeric, floor=1e-6) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = mlp_init([2, 8, 3], seed=5)
        restored = load_checkpoint(save_checkpoint(model, tmp_path / "model.ckpt"))
        assert restored.layer_sizes == [2, 8, 3]
        for p, q in zip(model.params, restored.params):
            assert p.data.tobytes() == q.data.tobytes()

    def test_header_layout(self):
        payload = encode_checkpoint(mlp_init([2, 2], seed=0))
        assert payload[:8] == b"MFORGE01"
        assert payload[8:12] == (2).to_bytes(4, "little")
        assert len(payload) == 12 + 8 + 8 * (4 + 2)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOTMAGIC" + bytes(8))

    def test_truncated(self):
        payload = encode_checkpoint(mlp_init([2, 3, 2], seed=0))
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(payload[:-8])

    def test_trailing_bytes(self):
        payload = encode_checkpoint(mlp_init([2, 2], seed=0))
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(payload + b"\x00")

    @pytest.mark.parametrize("sizes", [[], [2]])
    def test_too_few_layers(self, sizes):
        payload = CHECKPOINT_MAGIC + struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
        with pytest.raises(CheckpointError, match="at least 2"):
            decode_checkpoint(payload)
