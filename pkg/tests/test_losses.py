import math

import numpy as np
import pytest

from domadapt.losses import (
    ConfidenceSource, confidence_domain, confidence_task, disc_loss,
    feat_adv_loss, instance_weight, pseudo_labels, task_loss,
    weighted_pseudo_loss,
)
from domadapt.models import forward_domain, forward_features, forward_target, forward_task
from domadapt.tensor import GradTape, ShapeError, Tensor, grad_check, log_softmax

from conftest import loss_wrt, param_slots, rand_tensor, tiny_bundle


# Scalar-loop oracles: independent plain-Python reimplementations.

def loop_task_loss(logp_rows, labels):
    total = 0.0
    for row, y in zip(logp_rows, labels):
        total += -row[y]
    return total / len(labels)


def loop_weighted_loss(logp_rows, labels, weights, normalize=False):
    total, wsum = 0.0, 0.0
    for row, y, w in zip(logp_rows, labels, weights):
        total += w * -row[y]
        wsum += w
    denom = wsum if normalize else len(labels)
    return 0.0 if denom == 0 else total / denom


def loop_disc_loss(d_src, d_tgt):
    a = sum(-math.log(1.0 - d) for d in d_src) / len(d_src)
    b = sum(-math.log(d) for d in d_tgt) / len(d_tgt)
    return a + b


def rand_logp(rng, n, k):
    return log_softmax(rand_tensor(rng, n, k))


def rand_probs(rng, n, lo=0.05, hi=0.95):
    return Tensor(rng.uniform(lo, hi, (n, 1)))


class TestTaskLoss:
    def test_perfect_prediction_is_near_zero(self):
        logp = log_softmax(Tensor([[1000.0, 0.0, 0.0], [0.0, 1000.0, 0.0]]))
        assert task_loss(logp, np.array([0, 1])).item() < 1e-9

    def test_uniform_over_ten_classes(self):
        logp = log_softmax(Tensor(np.zeros((4, 10))))
        assert abs(task_loss(logp, np.array([3, 1, 9, 0])).item() - math.log(10)) < 1e-12

    def test_matches_scalar_loop(self, rng):
        logp = rand_logp(rng, 7, 5)
        labels = rng.integers(0, 5, 7)
        expected = loop_task_loss(logp.data.tolist(), labels.tolist())
        assert abs(task_loss(logp, labels).item() - expected) < 1e-12

    def test_out_of_range_label(self, rng):
        with pytest.raises(ValueError, match="label out of range"):
            task_loss(rand_logp(rng, 3, 4), np.array([0, 4, 1]))

    def test_nonnegative(self, rng):
        for _ in range(20):
            logp = rand_logp(rng, 5, 4)
            assert task_loss(logp, rng.integers(0, 4, 5)).item() >= 0.0


class TestDiscLoss:
    def test_maximal_confusion_point(self):
        half = Tensor(np.full((6, 1), 0.5))
        assert abs(disc_loss(half, half).item() - 2.0 * math.log(2.0)) < 1e-12

    def test_perfect_discriminator_is_near_zero(self):
        eps = 1e-7
        src = Tensor(np.full((4, 1), eps))
        tgt = Tensor(np.full((4, 1), 1.0 - eps))
        assert disc_loss(src, tgt).item() < 1e-6

    def test_matches_scalar_loop(self, rng):
        src, tgt = rand_probs(rng, 5), rand_probs(rng, 3)
        expected = loop_disc_loss(src.data[:, 0].tolist(), tgt.data[:, 0].tolist())
        assert abs(disc_loss(src, tgt).item() - expected) < 1e-12

    def test_nonnegative(self, rng):
        for _ in range(20):
            assert disc_loss(rand_probs(rng, 4), rand_probs(rng, 6)).item() >= 0.0

    def test_requires_columns(self, rng):
        with pytest.raises(ShapeError):
            disc_loss(rand_tensor(rng, 3, 2), rand_probs(rng, 3))


class TestFeatAdvLoss:
    def test_equals_disc_loss_with_roles_swapped(self, rng):
        for _ in range(30):
            a, b = rand_probs(rng, 4), rand_probs(rng, 7)
            assert abs(feat_adv_loss(a, b).item() - disc_loss(b, a).item()) <= 1e-15

    def test_maximal_confusion_point(self):
        half = Tensor(np.full((5, 1), 0.5))
        assert abs(feat_adv_loss(half, half).item() - 2.0 * math.log(2.0)) < 1e-12

    def test_matches_scalar_loop(self, rng):
        src, tgt = rand_probs(rng, 6), rand_probs(rng, 4)
        expected = loop_disc_loss(tgt.data[:, 0].tolist(), src.data[:, 0].tolist())
        assert abs(feat_adv_loss(src, tgt).item() - expected) < 1e-12


class TestConfidenceWeights:
    def test_domain_confidence_definition(self):
        w = confidence_domain(Tensor([[0.2]]))
        assert abs(w.item() - 0.8) < 1e-15

    def test_domain_confidence_of_certain_target_is_tiny(self):
        w = confidence_domain(Tensor([[1.0 - 1e-7]]))
        assert abs(w.item() - 1e-7) < 1e-15

    def test_domain_confidence_complements_d(self, rng):
        for _ in range(20):
            d = rand_probs(rng, 8)
            total = confidence_domain(d).data + d.data
            assert np.abs(total - 1.0).max() < 1e-15

    def test_task_confidence_uniform(self):
        logp = log_softmax(Tensor(np.zeros((3, 10))))
        np.testing.assert_allclose(confidence_task(logp).data, 0.1, atol=1e-12)

    def test_task_confidence_one_hot(self):
        logp = log_softmax(Tensor([[1000.0, 0.0, 0.0]]))
        assert confidence_task(logp).item() > 1.0 - 1e-9

    def test_task_confidence_matches_scalar_loop(self, rng):
        logp = rand_logp(rng, 6, 4)
        expected = [math.exp(max(row)) for row in logp.data.tolist()]
        np.testing.assert_allclose(confidence_task(logp).data[:, 0], expected, atol=1e-15)

    def test_instance_weight_identity(self, rng):
        d = rand_probs(rng, 5)
        w = instance_weight(d)
        np.testing.assert_array_equal(w.data, d.data)
        total = w.data + confidence_domain(d).data
        assert np.abs(total - 1.0).max() < 1e-15

    def test_instance_weight_monotonic(self):
        lo = instance_weight(Tensor([[0.3]])).item()
        hi = instance_weight(Tensor([[0.9]])).item()
        assert hi > lo

    def test_all_weight_formulas_stay_in_unit_interval(self, rng):
        for _ in range(50):
            d = rand_probs(rng, 6, lo=1e-7, hi=1.0 - 1e-7)
            logp = rand_logp(rng, 6, 5)
            for w in (confidence_domain(d), instance_weight(d), confidence_task(logp)):
                assert w.data.min() >= 0.0
                assert w.data.max() <= 1.0


class TestWeightedPseudoLoss:
    def test_zero_weights_give_zero_loss_and_zero_gradients(self, rng):
        bundle = tiny_bundle(0)
        x = rand_tensor(rng, 4, 3)
        tape = GradTape()
        feats = forward_features(bundle.extractor, x, tape)
        logp = forward_task(bundle.task_head, feats, tape)
        loss = weighted_pseudo_loss(logp, np.array([0, 1, 2, 0]),
                                    Tensor(np.zeros((4, 1))), tape)
        assert loss.item() == 0.0
        grads = tape.backward(loss)
        for p in bundle.extractor.parameters() + bundle.task_head.parameters():
            assert (grads.wrt(p) == 0.0).all()

    def test_unit_weights_reduce_to_task_loss(self, rng):
        logp = rand_logp(rng, 6, 4)
        labels = rng.integers(0, 4, 6)
        ones = Tensor(np.ones((6, 1)))
        diff = abs(weighted_pseudo_loss(logp, labels, ones).item()
                   - task_loss(logp, labels).item())
        assert diff <= 1e-12

    def test_matches_scalar_loop(self, rng):
        logp = rand_logp(rng, 5, 3)
        labels = rng.integers(0, 3, 5)
        weights = rand_probs(rng, 5, lo=0.0, hi=1.0)
        for normalize in (False, True):
            expected = loop_weighted_loss(logp.data.tolist(), labels.tolist(),
                                          weights.data[:, 0].tolist(), normalize)
            got = weighted_pseudo_loss(logp, labels, weights, normalize=normalize).item()
            assert abs(got - expected) < 1e-12

    def test_rejects_out_of_range_weights(self, rng):
        logp = rand_logp(rng, 3, 3)
        with pytest.raises(ValueError, match="weights"):
            weighted_pseudo_loss(logp, np.array([0, 1, 2]), Tensor([[0.5], [1.2], [0.1]]))

    def test_rejects_mismatched_weight_shape(self, rng):
        logp = rand_logp(rng, 3, 3)
        with pytest.raises(ShapeError):
            weighted_pseudo_loss(logp, np.array([0, 1, 2]), Tensor(np.ones((2, 1))))


class TestPseudoLabels:
    def test_argmax(self, rng):
        logp = rand_logp(rng, 5, 4)
        np.testing.assert_array_equal(pseudo_labels(logp), logp.data.argmax(axis=1))

    def test_tie_breaks_to_lowest_index(self):
        logp = Tensor(np.log(np.full((2, 4), 0.25)))
        np.testing.assert_array_equal(pseudo_labels(logp), [0, 0])


class TestLossGradients:
    """Finite-difference checks of every loss through a full model."""

    def test_task_loss_gradient_wrt_every_parameter(self, rng):
        bundle = tiny_bundle(1)
        x = rand_tensor(rng, 4, 3)
        labels = rng.integers(0, 3, 4)

        def build(tape):
            feats = forward_features(bundle.extractor, x, tape)
            return task_loss(forward_task(bundle.task_head, feats, tape), labels, tape)

        for slot in param_slots(bundle.extractor, bundle.task_head):
            assert grad_check(loss_wrt(slot, build), slot.get()) < 1e-4

    def test_disc_loss_gradient(self, rng):
        bundle = tiny_bundle(2)
        xs, xt = rand_tensor(rng, 4, 3), rand_tensor(rng, 4, 3)

        def build(tape):
            fs = forward_features(bundle.extractor, xs, tape)
            ft = forward_features(bundle.extractor, xt, tape)
            return disc_loss(forward_domain(bundle.domain_head, fs, tape),
                             forward_domain(bundle.domain_head, ft, tape), tape)

        for slot in param_slots(bundle.domain_head, bundle.extractor):
            assert grad_check(loss_wrt(slot, build), slot.get()) < 1e-4

    def test_adv_loss_gradient(self, rng):
        bundle = tiny_bundle(3)
        xs, xt = rand_tensor(rng, 4, 3), rand_tensor(rng, 4, 3)

        def build(tape):
            fs = forward_features(bundle.extractor, xs, tape)
            ft = forward_features(bundle.extractor, xt, tape)
            return feat_adv_loss(forward_domain(bundle.domain_head, fs, tape),
                                 forward_domain(bundle.domain_head, ft, tape), tape)

        for slot in param_slots(bundle.extractor):
            assert grad_check(loss_wrt(slot, build), slot.get()) < 1e-4

    def test_weighted_pseudo_loss_gradient(self, rng):
        bundle = tiny_bundle(4)
        x = rand_tensor(rng, 4, 3)
        labels = rng.integers(0, 3, 4)
        weights = rand_probs(rng, 4, lo=0.1, hi=0.9)

        def build(tape):
            feats = forward_features(bundle.extractor, x, tape)
            logp = forward_target(bundle.target_head, feats, tape)
            return weighted_pseudo_loss(logp, labels, weights, tape)

        for slot in param_slots(bundle.extractor, bundle.target_head):
            assert grad_check(loss_wrt(slot, build), slot.get()) < 1e-4


def test_confidence_source_values():
    assert ConfidenceSource("task") is ConfidenceSource.TASK_SOFTMAX
    assert ConfidenceSource("domain") is ConfidenceSource.DOMAIN_DISC
