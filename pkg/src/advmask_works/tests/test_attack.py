# -*- coding: utf-8 -*-

import math
import unittest

import numpy as np

from advmask_works import autograd as ag
from advmask_works.attack import AttackConfig
from advmask_works.attack import AttackMaskResult
from advmask_works.attack import PerturbationBounds
from advmask_works.attack import adversarial_prediction
from advmask_works.attack import attack_dataset
from advmask_works.attack import attack_metrics
from advmask_works.attack import compute_L_init
from advmask_works.attack import compute_lambda
from advmask_works.attack import compute_loss
from advmask_works.attack import compute_mask
from advmask_works.attack import initial_state
from advmask_works.attack import momentum_sign_update
from advmask_works.attack import run_attack
from advmask_works.attack import step
from advmask_works.datasets import normalize
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import DimensionError
from advmask_works.models import Model
from advmask_works.models import predict
from advmask_works.models import reference_spec
from advmask_works.tests import synthetic_set
from advmask_works.tests import tiny_spec
from advmask_works.tests.test_autograd import INSTANCES
from advmask_works.tests.test_autograd import GradientCheckMixin
from advmask_works.training import TrainConfig
from advmask_works.training import train_classifier
from advmask_works.utils import rng_for


def identity(delta):
    return delta


class TrainedModelMixin:
    """Trains the tiny two-class classifier once per test case class."""

    @classmethod
    def setUpClass(cls):
        cls.dataset = normalize(synthetic_set(32, seed=0))
        cfg = TrainConfig(epochs=10, batch_size=8, learning_rate=0.02, seed=0,
                          basic_augment='none')
        cls.model = train_classifier(cls.dataset, tiny_spec(cls.dataset), cfg).frozen()
        cls.correct = [i for i in range(len(cls.dataset))
                       if predict(cls.model, cls.dataset.images[i]).argmax()
                       == cls.dataset.labels[i]]

    def sample(self, n=0):
        index = self.correct[n]
        return index, self.dataset.images[index].astype(np.float64), int(self.dataset.labels[index])


class ComputeMaskTestCase(unittest.TestCase):

    def test_zero_hidden_is_one_half(self):
        m = compute_mask(np.ones((1, 4, 4)), np.zeros((16, 16)), 3.0)
        self.assertEqual(m.shape, (1, 4, 4))
        np.testing.assert_allclose(m.data, np.full((1, 4, 4), 0.5))

    def test_closed_form(self):
        m = compute_mask(np.ones((1, 1, 1)), np.full((1, 1), 0.1), 100.0)
        self.assertAlmostEqual(m.item(), 1.0 / (1.0 + math.exp(-10.0)), places=6)

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(0)
        delta, weights = rng.normal(size=(2, 3, 3)), rng.normal(size=(18, 9))
        hidden = delta.reshape(1, -1) @ weights
        low = compute_mask(delta, weights, 1.0).data.reshape(-1)
        high = compute_mask(delta, weights, 2.0).data.reshape(-1)
        positive = hidden.reshape(-1) > 0
        self.assertTrue((high[positive] >= low[positive]).all())
        self.assertTrue((high[~positive] <= low[~positive]).all())

    def test_weight_shape(self):
        with self.assertRaises(DimensionError):
            compute_mask(np.ones((1, 4, 4)), np.zeros((16, 15)), 1.0)

    def test_alpha_must_be_positive(self):
        with self.assertRaises(ContractError):
            compute_mask(np.ones((1, 2, 2)), np.zeros((4, 4)), 0.0)


class ComputeLambdaTestCase(unittest.TestCase):

    def test_all_removed(self):
        self.assertEqual(compute_lambda(np.zeros((1, 4, 4)), 1.0, 5.0), 1.0)

    def test_all_kept(self):
        self.assertEqual(compute_lambda(np.ones((1, 4, 4)), 1.0, 5.0), 6.0)

    def test_half(self):
        m = np.array([[[0.6, 0.4], [0.4, 0.6]]])
        self.assertAlmostEqual(compute_lambda(m, 1.0, 5.0), 3.5)

    def test_tensor_argument(self):
        self.assertEqual(compute_lambda(ag.Tensor(np.ones((1, 2, 2))), 2.0, 1.0), 3.0)


class ComputeLossTestCase(TrainedModelMixin, unittest.TestCase):

    def setUp(self):
        # zero final layer: the logits are 0 for any input, so CE = ln 2
        self.flat = Model.initialize(self.model.spec, np.random.default_rng(0),
                                     zero_final=True).frozen()
        self.image = self.dataset.images[0]
        self.delta = np.full(self.image.shape, 0.1)
        self.half = ag.Tensor(np.full((1, 8, 8), 0.5))

    def test_cross_entropy_at_l_init(self):
        loss = compute_loss(self.image, 0, self.flat, self.delta, self.half,
                            math.log(2), eta=0.1, C=1.0, gamma=5.0)
        # hinge 0, lambda = C, mean(m) = 0.5
        self.assertAlmostEqual(loss.item(), 0.5, places=5)

    def test_confident_classifier(self):
        loss = compute_loss(self.image, 0, self.flat, self.delta, self.half,
                            math.log(2) * 1e6, eta=0.1, C=1.0, gamma=5.0)
        self.assertAlmostEqual(loss.item(), 1.5, places=5)

    def test_eta_scales_negative_term(self):
        loss = compute_loss(self.image, 0, self.flat, self.delta, self.half,
                            math.log(2) / 2, eta=0.1, C=1.0, gamma=5.0)
        # L_classify = -1, hinge = max(-1, -0.1)
        self.assertAlmostEqual(loss.item(), -0.1 + 0.5, places=5)

    def test_zero_mask_is_unperturbed(self):
        _, image, label = self.sample()
        zeros = ag.Tensor(np.zeros((1, 8, 8)))
        l_init = 2.0
        loss = compute_loss(image, label, self.model, self.delta, zeros, l_init,
                            eta=0.1, C=1.0, gamma=5.0)
        ce = -math.log(predict(self.model, image)[label])
        l_classify = 1.0 - ce / l_init
        self.assertAlmostEqual(loss.item(), max(l_classify, 0.1 * l_classify), places=4)

    def test_l_init_must_be_positive(self):
        with self.assertRaises(ContractError):
            compute_loss(self.image, 0, self.flat, self.delta, self.half, 0.0, 0.1, 1.0, 5.0)


class AttackLossGradientTestCase(unittest.TestCase, GradientCheckMixin):
    """Backward through compute_mask and compute_loss against central differences."""

    def setUp(self):
        spec = reference_spec((1, 4, 4), 2, conv_channels=(2,), dense_units=3)
        self.model = Model.initialize(spec, np.random.default_rng(0)).frozen()
        self.cfg = AttackConfig()

    def instance(self, rng):
        # keep every hidden unit away from 0 so the count in lambda is stable
        while True:
            delta = rng.normal(scale=0.5, size=(1, 4, 4))
            weights = rng.normal(scale=0.5, size=(16, 16))
            if np.abs(delta.reshape(1, -1) @ weights).min() > 0.05:
                return delta, weights

    def test_delta_and_encoder_weights(self):
        rng = np.random.default_rng(1)
        for n in range(INSTANCES):
            image = rng.normal(size=(1, 4, 4))
            label = n % 2
            delta, weights = self.instance(rng)
            alpha = rng.uniform(0.5, 3.0)
            hidden = (delta.reshape(1, -1) @ weights).reshape(1, 4, 4)
            m = 1.0 / (1.0 + np.exp(-alpha * hidden))
            ce = -math.log(predict(self.model, image + delta * m)[label])
            # both sides of the hinge
            l_init = 2.0 * ce if n % 2 else 0.5 * ce
            cfg = self.cfg

            def build(d, w):
                m = compute_mask(d, w, alpha)
                return compute_loss(image, label, self.model, d, m, l_init,
                                    cfg.eta, cfg.C, cfg.gamma)

            self.assertGradientsMatch(build, [delta, weights])


class MomentumSignUpdateTestCase(unittest.TestCase):

    def test_descends_by_beta(self):
        grad = np.full((1, 2, 2), 3.0)
        delta, momentum, stalled = momentum_sign_update(
            np.zeros((1, 2, 2)), grad, np.zeros((1, 2, 2)), 1.0, 0.1, identity)
        np.testing.assert_allclose(delta, np.full((1, 2, 2), -0.1))
        np.testing.assert_allclose(momentum, np.full((1, 2, 2), 0.25))
        self.assertFalse(stalled)

    def test_projection_holds_at_bound(self):
        eps = 0.3
        delta, _, _ = momentum_sign_update(
            np.full((1, 2, 2), eps), -np.ones((1, 2, 2)), np.zeros((1, 2, 2)), 1.0, 0.1,
            lambda d: np.clip(d, -eps, eps))
        np.testing.assert_array_equal(delta, np.full((1, 2, 2), eps))

    def test_zero_mu_forgets_history(self):
        grad = np.array([[[1.0, -3.0]]])
        _, momentum, _ = momentum_sign_update(
            np.zeros((1, 1, 2)), grad, np.array([[[-100.0, 100.0]]]), 0.0, 0.1, identity)
        np.testing.assert_allclose(momentum, grad / 4.0)

    def test_zero_gradient_stalls(self):
        delta, momentum, stalled = momentum_sign_update(
            np.full((1, 2, 2), 0.05), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 1.0, 0.1,
            identity)
        self.assertTrue(stalled)
        np.testing.assert_array_equal(delta, np.full((1, 2, 2), 0.05))
        np.testing.assert_array_equal(momentum, np.zeros((1, 2, 2)))


class AttackConfigTestCase(unittest.TestCase):

    def test_default_beta(self):
        self.assertAlmostEqual(AttackConfig(epsilon=0.5).beta, 0.05)

    def test_alpha_schedule(self):
        cfg = AttackConfig(alpha_min=0.1, alpha_max=100.0, iters=10)
        self.assertAlmostEqual(cfg.alpha_at(0), 0.1)
        self.assertAlmostEqual(cfg.alpha_at(10), 100.0)
        self.assertAlmostEqual(cfg.alpha_at(5), math.sqrt(0.1 * 100.0))

    def test_invalid(self):
        with self.assertRaises(ContractError):
            AttackConfig(alpha_min=2.0, alpha_max=1.0)
        with self.assertRaises(ContractError):
            AttackConfig(iters=-1)

    def test_fingerprint_follows_values(self):
        self.assertEqual(AttackConfig().fingerprint(), AttackConfig().fingerprint())
        self.assertNotEqual(AttackConfig(epsilon=0.1).fingerprint(),
                            AttackConfig(epsilon=0.2).fingerprint())


class PerturbationBoundsTestCase(TrainedModelMixin, unittest.TestCase):

    def test_raw_image_stays_in_box(self):
        _, image, _ = self.sample()
        bounds = PerturbationBounds(self.model, image, 0.5, 0.05)
        delta = bounds.project(np.random.default_rng(0).normal(scale=10.0, size=image.shape))
        std, mean = self.model.std[:, None, None], self.model.mean[:, None, None]
        raw = (image + delta) * std + mean
        self.assertGreaterEqual(raw.min(), -1e-5)
        self.assertLessEqual(raw.max(), 1.0 + 1e-5)
        self.assertLessEqual(np.abs(bounds.to_raw(delta)).max(), 0.5 + 1e-6)


class InitialAttackTestCase(TrainedModelMixin, unittest.TestCase):

    def test_already_misclassified(self):
        _, image, label = self.sample()
        init = compute_L_init(image, 1 - label, self.model, 0.1, 10)
        self.assertTrue(init.success)
        self.assertEqual(init.iterations, 0)
        expected = -math.log(predict(self.model, image)[1 - label])
        self.assertAlmostEqual(init.l_init, expected, places=4)

    def test_zero_epsilon(self):
        _, image, label = self.sample()
        init = compute_L_init(image, label, self.model, 0.0, 10)
        self.assertFalse(init.success)
        np.testing.assert_array_equal(init.delta, np.zeros_like(image))

    def test_large_budget_succeeds(self):
        _, image, label = self.sample()
        init = compute_L_init(image, label, self.model, 1.0, 100)
        self.assertTrue(init.success)
        self.assertGreater(init.l_init, 0.0)

    def test_full_mask_at_dense_success_has_zero_classify_loss(self):
        _, image, label = self.sample()
        init = compute_L_init(image, label, self.model, 1.0, 100)
        self.assertTrue(init.success)
        cfg = AttackConfig()
        m = np.ones((1,) + image.shape[1:])
        loss = compute_loss(image, label, self.model, init.delta, m, init.l_init,
                            cfg.eta, cfg.C, cfg.gamma)
        # only the sparsity term lambda * mean(m) = C + gamma is left
        self.assertAlmostEqual(loss.item(), cfg.C + cfg.gamma, delta=1e-5)


class RunAttackTestCase(TrainedModelMixin, unittest.TestCase):

    def setUp(self):
        self.cfg = AttackConfig(epsilon=0.3, iters=30, init_iters=30, seed=0)

    def test_zero_iterations_is_degenerate(self):
        index, image, label = self.sample()
        cfg = AttackConfig(epsilon=0.3, iters=0, init_iters=5)
        result = run_attack(image, label, self.model, cfg, index=index)
        self.assertTrue(result.degenerate)
        self.assertEqual(result.l0, len(result.pois))
        predicted = adversarial_prediction(image, self.model, result.delta, result.pois)
        self.assertEqual(result.success, predicted != label)

    def test_deterministic(self):
        index, image, label = self.sample()
        first = run_attack(image, label, self.model, self.cfg, index=index)
        second = run_attack(image, label, self.model, self.cfg, index=index)
        np.testing.assert_array_equal(first.pois, second.pois)
        self.assertEqual(first.l2, second.l2)

    def test_result_invariants(self):
        index, image, label = self.sample(1)
        result = run_attack(image, label, self.model, self.cfg, index=index)
        self.assertEqual(result.l0, len(result.pois))
        self.assertLessEqual(result.linf, self.cfg.epsilon + 1e-6)
        self.assertGreaterEqual(result.l2, result.linf)
        self.assertTrue(0.0 <= result.binarization <= 1.0)
        predicted = adversarial_prediction(image, self.model, result.delta, result.pois)
        self.assertEqual(result.success, predicted != label)
        self.assertEqual(result.predicted, predicted)
        self.assertFalse(result.degenerate)

    def test_failed_dense_attack_is_low_confidence(self):
        index, image, label = self.sample()
        cfg = AttackConfig(epsilon=0.0, iters=2, init_iters=3)
        result = run_attack(image, label, self.model, cfg, index=index)
        self.assertTrue(result.low_confidence)
        self.assertFalse(result.success)
        self.assertEqual(result.linf, 0.0)

    def test_step(self):
        _, image, label = self.sample()
        state = initial_state(image, self.model, self.cfg, 1.0, rng_for(0, 0))
        bounds = PerturbationBounds(self.model, image, self.cfg.epsilon, self.cfg.beta)
        after = step(state, image, label, self.model, self.cfg, bounds)
        self.assertEqual(after.iteration, 1)
        self.assertAlmostEqual(after.alpha, self.cfg.alpha_at(1))
        self.assertEqual(after.weights.shape, state.weights.shape)
        self.assertTrue((np.abs(after.delta) <= bounds.epsilon + 1e-9).all())
        self.assertFalse(np.array_equal(after.weights, state.weights))

    def test_step_leaves_trainable_model_untouched(self):
        _, image, label = self.sample()
        trainable = Model.initialize(self.model.spec, np.random.default_rng(4))
        state = initial_state(image, trainable, self.cfg, 1.0, rng_for(0, 0))
        state = step(state, image, label, trainable, self.cfg)
        step(state, image, label, trainable, self.cfg)
        self.assertTrue(all(p.requires_grad for p in trainable.params))
        self.assertTrue(all(p.grad is None for p in trainable.params))

    def test_dataset_independent_of_threads(self):
        cfg = AttackConfig(epsilon=0.3, iters=5, init_iters=5, seed=2)
        indices = self.correct[:3]
        single = attack_dataset(self.dataset, indices, self.model, cfg, threads=1)
        pooled = attack_dataset(self.dataset, indices, self.model, cfg, threads=3)
        self.assertEqual([r.index for r in single], indices)
        for a, b in zip(single, pooled):
            np.testing.assert_array_equal(a.pois, b.pois)


class AttackMetricsTestCase(unittest.TestCase):

    def result(self, success, l0=10, l2=1.0, linf=0.1):
        return AttackMaskResult(index=0, label=0, pois=np.zeros((l0, 2), dtype=np.int64),
                                success=success, l0=l0, l2=l2, linf=linf, binarization=1.0)

    def test_empty(self):
        with self.assertRaises(ContractError):
            attack_metrics([])

    def test_all_failures(self):
        summary = attack_metrics([self.result(False), self.result(False)])
        self.assertEqual(summary.asr, 0.0)
        self.assertIsNone(summary.mean_l0)
        self.assertIsNone(summary.mean_l2)

    def test_single_success(self):
        summary = attack_metrics([self.result(True, l0=320)])
        self.assertEqual(summary.asr, 1.0)
        self.assertEqual(summary.mean_l0, 320.0)

    def test_means_over_successes_only(self):
        summary = attack_metrics([self.result(True, l0=10, l2=2.0),
                                  self.result(True, l0=30, l2=4.0),
                                  self.result(False, l0=1000, l2=100.0)])
        self.assertAlmostEqual(summary.asr, 2.0 / 3)
        self.assertEqual(summary.mean_l0, 20.0)
        self.assertEqual(summary.mean_l2, 3.0)
        self.assertEqual(summary.to_dict()['successes'], 2)
