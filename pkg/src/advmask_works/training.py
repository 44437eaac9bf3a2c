# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

import logging
from dataclasses import dataclass

import numpy as np

from advmask_works import autograd as ag
from advmask_works import settings
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import DimensionError
from advmask_works.exceptions import DivergenceError
from advmask_works.exceptions import NumericalError
from advmask_works.images import basic_augment
from advmask_works.models import Model
from advmask_works.models import predict_batch


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = settings.TRAIN_EPOCHS
    batch_size: int = settings.TRAIN_BATCH_SIZE
    learning_rate: float = settings.TRAIN_LEARNING_RATE
    momentum: float = settings.TRAIN_MOMENTUM
    weight_decay: float = settings.TRAIN_WEIGHT_DECAY
    seed: int = settings.SEED
    # The learning rate is multiplied by lr_gamma every lr_step epochs
    lr_step: int = settings.TRAIN_LR_STEP
    lr_gamma: float = settings.TRAIN_LR_GAMMA
    # none, crop or crop-flip
    basic_augment: str = 'crop-flip'
    pad: int = settings.TRAIN_PAD

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ContractError('epochs must be >= 0, batch size >= 1 and learning rate > 0')
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ContractError('momentum must lie in [0, 1) and weight decay be >= 0')
        if self.lr_step < 1 or self.lr_gamma <= 0:
            raise ContractError('lr_step must be >= 1 and lr_gamma > 0')
        if self.basic_augment not in ('none', 'crop', 'crop-flip'):
            raise ContractError('Unknown basic augmentation `{}`'.format(self.basic_augment))

    def learning_rate_at(self, epoch):
        return self.learning_rate * self.lr_gamma ** (epoch // self.lr_step)


class SGD:
    """Stochastic gradient descent with momentum and L2 weight decay."""

    def __init__(self, params, momentum, weight_decay):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            grad = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += grad
            p.data = (p.data - lr * v).astype(p.data.dtype)


def evaluate(model, dataset):
    """Top-1 accuracy of ``model`` on a normalized ``LabeledImageSet``."""
    if len(dataset) == 0:
        raise ContractError('Cannot evaluate on an empty dataset')
    predicted = predict_batch(model, dataset.images)
    return float((predicted == dataset.labels).mean())


def train_classifier(dataset, spec, cfg, augmenter=None, test_set=None):
    """Trains a classifier from scratch on a normalized ``LabeledImageSet``.

    ``augmenter``, when given, is called once per epoch with
    ``select(epoch, n, rng)`` to pick the samples to occlude, then per
    picked sample as ``augmenter(image, index, epoch, transform)``. It runs
    after normalization and basic augmentation.

    Returns the trained ``Model``; ``model.history`` has one entry per
    epoch with loss, train/test accuracy and the augmented fraction.

    """
    if len(dataset) == 0:
        raise ContractError('Cannot train on an empty dataset')
    if tuple(dataset.images.shape[1:]) != spec.input_shape:
        raise DimensionError('dataset images {} do not match the model input {}'.format(
            dataset.images.shape[1:], spec.input_shape))
    rng = np.random.default_rng(cfg.seed)
    model = Model.initialize(spec, rng)
    optimizer = SGD(model.params, cfg.momentum, cfg.weight_decay)
    n = len(dataset)

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate_at(epoch)
        order = rng.permutation(n)
        chosen = np.zeros(n, dtype=bool)
        if augmenter is not None:
            chosen = augmenter.select(epoch, n, rng)
        losses = []
        correct = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            images = np.empty((len(batch),) + spec.input_shape, dtype=np.float32)
            for row, index in enumerate(batch):
                image, transform = basic_augment(dataset.images[index], rng,
                                                 mode=cfg.basic_augment, pad=cfg.pad)
                if chosen[index]:
                    image = augmenter(image, index, epoch, transform)
                images[row] = image
            labels = dataset.labels[batch]
            try:
                model.zero_grad()
                logits = model.forward(images)
                loss = ag.softmax_cross_entropy(logits, labels)
                ag.backward(loss)
            except NumericalError as e:
                raise DivergenceError('Training diverged at epoch {} step {}: {}'.format(
                    epoch, step, e), epoch=epoch, step=step)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError('Training loss is {} at epoch {} step {}'.format(
                    loss_value, epoch, step), epoch=epoch, step=step)
            optimizer.step(lr)
            losses.append(loss_value * len(batch))
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        record = {
            'epoch': epoch,
            'learning_rate': lr,
            'loss': float(np.sum(losses) / n),
            'train_accuracy': correct / float(n),
            'augmented_fraction': float(chosen.mean()),
            }
        if test_set is not None:
            record['test_accuracy'] = evaluate(model, test_set)
        model.history.append(record)
        logger.info('Epoch {}: loss {:.4f}, train acc {:.4f}, test acc {}, augmented {:.3f}'.format(
            epoch, record['loss'], record['train_accuracy'],
            record.get('test_accuracy', 'n/a'), record['augmented_fraction']))
    return model
