# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Sparse adversarial attack producing per-image key points.

A perturbation ``delta`` and a fully-connected encoder ``W`` are optimized
together. The encoder turns ``delta`` into a soft mask
``m = sigmoid(alpha * H(delta))``; only the pixels the mask keeps carry
the perturbation into the classifier. ``alpha`` grows geometrically from
``alpha_min`` to ``alpha_max`` so that ``m`` ends up close to binary, and
the pixels with ``m > 0.5`` at the end are the points of interest.

``epsilon`` and ``beta`` are given in raw [0,1] pixel units and scaled per
channel by the model's normalization, so reported norms are in raw units.

"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace

import numpy as np

from advmask_works import autograd as ag
from advmask_works import settings
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import DimensionError
from advmask_works.utils import fingerprint
from advmask_works.utils import rng_for


logger = logging.getLogger(__name__)

BINARY_TOLERANCE = 0.05


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = settings.ATTACK_EPSILON
    alpha_min: float = settings.ATTACK_ALPHA_MIN
    alpha_max: float = settings.ATTACK_ALPHA_MAX
    eta: float = settings.ATTACK_ETA
    C: float = settings.ATTACK_C
    gamma: float = settings.ATTACK_GAMMA
    mu: float = settings.ATTACK_MU
    beta: float = settings.ATTACK_BETA
    iters: int = settings.ATTACK_ITERS
    init_iters: int = settings.ATTACK_INIT_ITERS
    encoder_lr: float = settings.ATTACK_ENCODER_LR
    seed: int = settings.SEED

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError('epsilon must be >= 0')
        if not 0 < self.alpha_min < self.alpha_max:
            raise ContractError('alpha range must satisfy 0 < alpha_min < alpha_max')
        if self.C <= 0 or self.gamma <= 0:
            raise ContractError('C and gamma must be positive')
        if self.iters < 0 or self.init_iters < 0:
            raise ContractError('iteration budgets must be >= 0')
        if self.beta is None:
            object.__setattr__(self, 'beta', self.epsilon / 10.0)

    def alpha_at(self, t):
        """Geometric interpolation from alpha_min (t=0) to alpha_max (t=iters)."""
        if self.iters == 0:
            return self.alpha_min
        return self.alpha_min * (self.alpha_max / self.alpha_min) ** (float(t) / self.iters)

    def fingerprint(self):
        return fingerprint(asdict(self))


@dataclass(frozen=True)
class AttackState:
    delta: np.ndarray
    weights: np.ndarray
    momentum: np.ndarray
    alpha: float
    iteration: int
    l_init: float
    stalls: int = 0


@dataclass
class AttackMaskResult:
    index: int
    label: int
    pois: np.ndarray
    success: bool
    l0: int
    l2: float
    linf: float
    binarization: float
    predicted: int = -1
    low_confidence: bool = False
    degenerate: bool = False
    stalls: int = 0
    delta: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            'index': self.index,
            'label': self.label,
            'predicted': self.predicted,
            'success': self.success,
            'l0': self.l0,
            'l2': self.l2,
            'linf': self.linf,
            'binarization': self.binarization,
            'low_confidence': self.low_confidence,
            'degenerate': self.degenerate,
            'stalls': self.stalls,
            }


@dataclass
class InitialAttack:
    l_init: float
    success: bool
    delta: np.ndarray
    iterations: int


@dataclass
class AttackSummary:
    total: int
    successes: int
    asr: float
    mean_l0: float = None
    mean_l2: float = None
    mean_linf: float = None
    degenerate: int = 0
    low_confidence: int = 0

    def to_dict(self):
        return asdict(self)


class PerturbationBounds:
    """Per-channel limits of ``delta`` in normalized units for one image."""

    def __init__(self, model, image, epsilon, beta):
        std = model.std.astype(np.float64)[:, None, None]
        mean = model.mean.astype(np.float64)[:, None, None]
        self.std = std
        self.epsilon = epsilon / std
        self.beta = beta / std
        # raw x + delta must stay inside [0, 1]
        self.lower = np.minimum((0.0 - mean) / std - image, 0.0)
        self.upper = np.maximum((1.0 - mean) / std - image, 0.0)

    def project(self, delta):
        delta = np.clip(delta, self.lower, self.upper)
        return np.clip(delta, -self.epsilon, self.epsilon)

    def to_raw(self, delta):
        return delta * self.std


def momentum_sign_update(delta, grad, momentum, mu, beta, project):
    """One momentum-sign descent step.

    ``g' = mu * g + grad / |grad|_1`` and ``delta' = project(delta - beta * sign(g'))``.
    A zero gradient contributes nothing; the third return value flags it.

    """
    norm = np.abs(grad).sum()
    stalled = not norm > 0
    if stalled:
        momentum = mu * momentum
    else:
        momentum = mu * momentum + grad / norm
    delta = project(delta - beta * np.sign(momentum))
    return delta, momentum, stalled


def _frozen(model):
    if any(p.requires_grad for p in model.params):
        return model.frozen()
    return model


def _logits(model, x_adv):
    return model.forward(ag.reshape(x_adv, (1,) + tuple(x_adv.shape)))


def compute_L_init(image, label, model, epsilon, max_iters, mu=settings.ATTACK_MU, beta=None):
    """Dense momentum-sign attack (mask of ones, no sparsity term).

    Stops at the first misclassification and returns the cross-entropy
    there, or the final iterate's cross-entropy flagged as unsuccessful.

    """
    model = _frozen(model)
    if beta is None:
        beta = epsilon / 10.0
    image = np.asarray(image, dtype=np.float64)
    bounds = PerturbationBounds(model, image, epsilon, beta)
    x = ag.Tensor(image)
    delta = np.zeros_like(image)
    momentum = np.zeros_like(image)
    for it in range(max_iters + 1):
        d = ag.Tensor(delta, requires_grad=True)
        logits = _logits(model, ag.add(x, d))
        ce = ag.softmax_cross_entropy(logits, [label])
        if int(logits.data.argmax()) != label:
            logger.debug('Dense attack succeeded after {} iterations, CE {:.4f}'.format(
                it, ce.item()))
            return InitialAttack(ce.item(), True, delta, it)
        if it == max_iters:
            break
        ag.backward(ce)
        # ascend the cross-entropy
        delta, momentum, _ = momentum_sign_update(
            delta, -d.grad, momentum, mu, bounds.beta, bounds.project)
    return InitialAttack(ce.item(), False, delta, max_iters)


def compute_mask(delta, weights, alpha):
    """``sigmoid(alpha * H(delta))`` as a ``[1,h,w]`` tensor."""
    delta, weights = ag.as_tensor(delta), ag.as_tensor(weights)
    if alpha <= 0:
        raise ContractError('alpha must be positive')
    c, h, w = delta.shape
    if weights.shape != (c * h * w, h * w):
        raise DimensionError('encoder weights {} do not fit a perturbation {}'.format(
            weights.shape, delta.shape))
    hidden = ag.matmul(ag.reshape(delta, (1, c * h * w)), weights)
    return ag.reshape(ag.sigmoid(ag.scale(hidden, alpha)), (1, h, w))


def compute_lambda(m, C, gamma):
    """``C + gamma * (fraction of mask entries above 0.5)``."""
    m = m.data if isinstance(m, ag.Tensor) else np.asarray(m)
    return float(C + gamma * np.mean(m > 0.5))


def compute_loss(image, label, model, delta, m, L_init, eta, C, gamma):
    """``max(L_cls, eta * L_cls) + lambda * |m|_1 / N`` with
    ``L_cls = 1 - CE(f(x + delta * m), y) / L_init``.

    ``lambda`` enters as a constant. Pass a frozen model unless gradients
    for its parameters are wanted.

    """
    if not L_init > 0:
        raise ContractError('L_init must be positive, got {}'.format(L_init))
    x = ag.as_tensor(image)
    x_adv = ag.add(x, ag.broadcast_mul_channels(delta, m))
    ce = ag.softmax_cross_entropy(_logits(model, x_adv), [label])
    l_classify = ag.add_scalar(ag.scale(ce, -1.0 / L_init), 1.0)
    hinge = ag.maximum(l_classify, ag.scale(l_classify, eta))
    lam = compute_lambda(m, C, gamma)
    # m lies in (0, 1), so its mean is |m|_1 / N
    return ag.add(hinge, ag.scale(ag.mean(m), lam))


def step(state, image, label, model, cfg, bounds=None):
    """Advances the joint optimization of perturbation and encoder by one iteration."""
    model = _frozen(model)
    image = np.asarray(image)
    if bounds is None:
        bounds = PerturbationBounds(model, image, cfg.epsilon, cfg.beta)
    delta = ag.Tensor(state.delta, requires_grad=True)
    weights = ag.Tensor(state.weights, requires_grad=True)
    m = compute_mask(delta, weights, state.alpha)
    loss = compute_loss(image, label, model, delta, m, state.l_init, cfg.eta, cfg.C, cfg.gamma)
    ag.backward(loss)

    new_delta, momentum, stalled = momentum_sign_update(
        state.delta, delta.grad, state.momentum, cfg.mu, bounds.beta, bounds.project)
    if stalled:
        logger.warning('Zero perturbation gradient at iteration {}'.format(state.iteration))
    new_weights = state.weights - cfg.encoder_lr * weights.grad
    return replace(state,
                   delta=new_delta,
                   weights=new_weights,
                   momentum=momentum,
                   alpha=cfg.alpha_at(state.iteration + 1),
                   iteration=state.iteration + 1,
                   stalls=state.stalls + int(stalled))


def binary_mask(pois, height, width):
    grid = np.zeros((1, height, width))
    pois = np.asarray(pois, dtype=np.int64).reshape(-1, 2)
    grid[0, pois[:, 0], pois[:, 1]] = 1.0
    return grid


def adversarial_prediction(image, model, delta, pois):
    """Predicted class of ``x + delta * mask(pois)``."""
    _, h, w = np.shape(image)
    x_adv = np.asarray(image) + np.asarray(delta) * binary_mask(pois, h, w)
    logits = _frozen(model).forward(np.asarray(x_adv)[None])
    return int(logits.data.argmax())


def initial_state(image, model, cfg, l_init, rng):
    c, h, w = image.shape
    bounds = PerturbationBounds(model, image, cfg.epsilon, cfg.beta)
    delta = bounds.project(rng.uniform(-1.0, 1.0, size=image.shape) * bounds.epsilon)
    limit = 1.0 / np.sqrt(c * h * w)
    weights = rng.uniform(-limit, limit, size=(c * h * w, h * w))
    return AttackState(delta=delta, weights=weights, momentum=np.zeros_like(delta),
                       alpha=cfg.alpha_at(0), iteration=0, l_init=l_init)


def run_attack(image, label, model, cfg, rng=None, index=0):
    """Finds the points of interest of one normalized image ``[c,h,w]``."""
    model = _frozen(model)
    if rng is None:
        rng = rng_for(cfg.seed, index)
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape

    init = compute_L_init(image, label, model, cfg.epsilon, cfg.init_iters, cfg.mu, cfg.beta)
    l_init = max(init.l_init, 1e-6)
    if not init.success:
        logger.warning('Dense attack failed on image {}; using final CE {:.4f} as L_init'.format(
            index, l_init))

    bounds = PerturbationBounds(model, image, cfg.epsilon, cfg.beta)
    state = initial_state(image, model, cfg, l_init, rng)
    for _ in range(cfg.iters):
        state = step(state, image, label, model, cfg, bounds)

    m = compute_mask(state.delta, state.weights, state.alpha).data.astype(np.float64)
    pois = np.argwhere(m[0] > 0.5)
    predicted = adversarial_prediction(image, model, state.delta, pois)
    perturbation = bounds.to_raw(state.delta * binary_mask(pois, h, w))
    result = AttackMaskResult(
        index=index,
        label=int(label),
        pois=pois,
        success=predicted != label,
        l0=len(pois),
        l2=float(np.sqrt((perturbation ** 2).sum())),
        linf=float(np.abs(perturbation).max()) if perturbation.size else 0.0,
        binarization=float(np.mean(np.minimum(m, 1.0 - m) <= BINARY_TOLERANCE)),
        predicted=predicted,
        low_confidence=not init.success,
        degenerate=cfg.iters == 0,
        stalls=state.stalls,
        delta=state.delta,
        )
    logger.debug('Image {}: success={} l0={} l2={:.4f} linf={:.4f}'.format(
        index, result.success, result.l0, result.l2, result.linf))
    return result


def attack_dataset(dataset, indices, model, cfg, threads=0):
    """Runs ``run_attack`` over ``indices`` of a normalized dataset.

    Each image draws from its own ``(seed, index)`` stream, so the results
    do not depend on ``threads``. Results come back in ``indices`` order.

    """
    model = _frozen(model)
    workers = threads or os.cpu_count() or 1

    def _attack(index):
        return run_attack(dataset.images[index], int(dataset.labels[index]), model, cfg,
                          rng=rng_for(cfg.seed, index), index=int(index))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_attack, indices))
    logger.info('Attacked {} images with {} workers'.format(len(results), workers))
    return results


def attack_metrics(results):
    """ASR over all results; norm means over the successful ones only."""
    results = list(results)
    if not results:
        raise ContractError('attack_metrics needs at least one result')
    wins = [r for r in results if r.success]
    summary = AttackSummary(
        total=len(results),
        successes=len(wins),
        asr=len(wins) / float(len(results)),
        degenerate=sum(1 for r in results if r.degenerate),
        low_confidence=sum(1 for r in results if r.low_confidence),
        )
    if wins:
        summary.mean_l0 = float(np.mean([r.l0 for r in wins]))
        summary.mean_l2 = float(np.mean([r.l2 for r in wins]))
        summary.mean_linf = float(np.mean([r.linf for r in wins]))
    return summary
