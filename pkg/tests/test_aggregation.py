"""Tests for core/aggregation.py: adaptors, gate, fusion, head objective, inference."""
from __future__ import annotations

import numpy as np
import pytest

from core.aggregation import (
    GateParams,
    HeadParams,
    adapt,
    cross_entropy,
    forward_head,
    fuse,
    gate_weights,
    head_loss,
    head_step,
    init_head,
    predict_softmax,
    prototype_nn_predict,
)
from core.errors import DomainError, ShapeError
from core.numerics import init_mlp, with_arrays
from core.prototypes import PrototypeSet


def _random_head(rng, num_parties, dim, num_classes) -> HeadParams:
    head = init_head(num_parties, dim, num_classes, (), seed=int(rng.integers(1000)))
    adaptors = tuple(init_mlp([dim, dim], ["identity"], rng) for _ in range(num_parties))
    gate = GateParams(rng.standard_normal((num_parties * dim, num_parties)))
    return HeadParams(adaptors, gate, head.classifier)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


class TestForward:
    def test_init_head_is_uniform_concatenation(self, rng):
        head = init_head(3, 4, 5, (8,), seed=0)
        reps = [rng.standard_normal((6, 4)) for _ in range(3)]
        fused = forward_head(head, reps)
        assert np.allclose(fused.gate_weights, 1.0 / 3.0)
        assert np.allclose(fused.matrix, np.hstack(reps) / 3.0)

    def test_gate_rows_on_simplex_fuzz(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            m, d, n = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
            gate = GateParams(rng.standard_normal((m * d, m)) * 5)
            weights = gate_weights(rng.standard_normal((n, m * d)), gate)
            assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-9)

    def test_party_count_mismatch(self, rng):
        head = init_head(2, 3, 2, (4,), seed=0)
        with pytest.raises(ShapeError):
            forward_head(head, [rng.standard_normal((2, 3))])

    def test_adaptor_depth(self):
        head = init_head(2, 3, 2, (4,), seed=0, adaptor_depth=2)
        assert all(len(a.layers) == 2 for a in head.adaptors)

    def test_adapt_is_the_adaptor_forward(self, rng):
        adaptor = init_mlp([3, 3], ["relu"], rng)
        rep = rng.standard_normal((5, 3))
        expected = np.maximum(rep @ adaptor.layers[0].weight + adaptor.layers[0].bias, 0.0)
        assert np.allclose(adapt(rep, adaptor), expected)

    def test_adapt_must_keep_dimension(self, rng):
        with pytest.raises(ShapeError):
            adapt(rng.standard_normal((2, 3)), init_mlp([3, 4], ["identity"], rng))

    def test_fuse_scales_and_concatenates(self, rng):
        blocks = [rng.standard_normal((4, 2)) for _ in range(3)]
        weights = rng.dirichlet(np.ones(3), size=4)
        fused = fuse(blocks, weights)
        manual = np.hstack([b * weights[:, [m]] for m, b in enumerate(blocks)])
        assert np.allclose(fused.matrix, manual)
        assert fused.tape is None

    def test_fuse_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            fuse([np.ones((4, 2)), np.ones((3, 2))], np.full((4, 2), 0.5))


class TestObjective:
    def test_cross_entropy_rejects_out_of_range_labels(self):
        with pytest.raises(DomainError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_cross_entropy_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((4, 4)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(np.log(4.0))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(21)
        eps = 1e-5
        for _ in range(100):
            m, d, z, n = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(2, 5)), int(rng.integers(1, 17))
            head = _random_head(rng, m, d, z)
            reps = [rng.standard_normal((n, d)) for _ in range(m)]
            labels = rng.integers(0, z, size=n)
            _, grads, _ = head_loss(head, reps, labels)

            dir_cls = [rng.standard_normal(a.shape) for a in head.classifier.arrays()]
            dir_gate = rng.standard_normal(head.gate.weight.shape)
            dir_ada = [[rng.standard_normal(a.shape) for a in ad.arrays()] for ad in head.adaptors]
            dir_reps = [rng.standard_normal(r.shape) for r in reps]

            def value(sign):
                s = sign * eps
                moved = HeadParams(
                    tuple(
                        with_arrays(ad, [a + s * v for a, v in zip(ad.arrays(), dirs)])
                        for ad, dirs in zip(head.adaptors, dir_ada)
                    ),
                    GateParams(head.gate.weight + s * dir_gate),
                    with_arrays(head.classifier, [a + s * v for a, v in zip(head.classifier.arrays(), dir_cls)]),
                )
                return head_loss(moved, [r + s * v for r, v in zip(reps, dir_reps)], labels)[0]

            numeric = (value(1.0) - value(-1.0)) / (2 * eps)
            analytic = float(sum(np.sum(g * v) for g, v in zip(grads.classifier.arrays(), dir_cls)))
            analytic += float(np.sum(grads.gate * dir_gate))
            for g_ad, dirs in zip(grads.adaptors, dir_ada):
                analytic += float(sum(np.sum(g * v) for g, v in zip(g_ad.arrays(), dirs)))
            analytic += float(sum(np.sum(g * v) for g, v in zip(grads.reps, dir_reps)))
            assert _rel_err(analytic, numeric) <= 1e-4

    def test_step_respects_freeze_flags(self, rng):
        head = init_head(2, 3, 3, (4,), seed=1)
        reps = [rng.standard_normal((8, 3)) for _ in range(2)]
        _, grads, _ = head_loss(head, reps, rng.integers(0, 3, size=8))
        frozen = head_step(head, grads, 0.1, train_gate=False, train_adaptors=False)
        assert frozen.gate is head.gate
        assert frozen.adaptors is head.adaptors
        trained = head_step(head, grads, 0.1)
        assert not np.array_equal(trained.gate.weight, head.gate.weight)

    def test_training_reduces_loss(self, rng):
        head = init_head(2, 3, 2, (8,), seed=2)
        labels = rng.integers(0, 2, size=32)
        reps = [rng.standard_normal((32, 3)) + labels[:, None] * 2.0 for _ in range(2)]
        first, _, _ = head_loss(head, reps, labels)
        for _ in range(50):
            _, grads, _ = head_loss(head, reps, labels)
            head = head_step(head, grads, 0.1)
        last, _, _ = head_loss(head, reps, labels)
        assert last < first


class TestInference:
    def test_softmax_masks_untrained_classes(self, rng):
        head = init_head(1, 2, 3, (4,), seed=0)
        preds = predict_softmax(head, [rng.standard_normal((50, 2))], trained_classes=[0, 2])
        assert 1 not in preds.tolist()

    @pytest.mark.parametrize("trained", [[], np.array([], dtype=np.int64), [0, 3]])
    def test_softmax_rejects_empty_or_unknown_trained_classes(self, rng, trained):
        head = init_head(1, 2, 3, (4,), seed=0)
        with pytest.raises(DomainError):
            predict_softmax(head, [rng.standard_normal((5, 2))], trained_classes=trained)

    def test_prototype_nn_sums_party_similarities(self):
        sets = [PrototypeSet(1, np.eye(2)), PrototypeSet(2, np.eye(2))]
        reps = [np.array([[1.0, 0.2], [0.1, 1.0]]), np.array([[0.9, 0.0], [0.0, 1.0]])]
        assert prototype_nn_predict(reps, sets).tolist() == [0, 1]

    def test_prototype_nn_ties_go_to_lowest_class(self):
        sets = [PrototypeSet(1, np.eye(2))]
        assert prototype_nn_predict([np.array([[1.0, 1.0]])], sets).tolist() == [0]

