# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

import gzip
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from advmask_works import settings
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import FormatError
from advmask_works.utils import fnv1a_64


logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE


class LabeledImageSet:
    """Images ``[n,c,h,w]`` with integer labels.

    Freshly loaded sets hold raw pixels in [0,1] and ``mean``/``std`` of
    ``None``. ``normalize()`` returns a standardized copy carrying the
    per-channel statistics it used; ``raw_images`` keeps the [0,1] pixels
    for rendering.

    """

    def __init__(self, images, labels, mean=None, std=None, raw_images=None):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError('{} images of shape {} for {} labels'.format(
                len(self.images), self.images.shape[1:], len(self.labels)))
        if len(self.labels) and self.labels.min() < 0:
            raise FormatError('negative label in dataset')
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float32)
        self.std = None if std is None else np.asarray(std, dtype=np.float32)
        self.raw_images = self.images if raw_images is None else raw_images

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def normalized(self):
        return self.mean is not None

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices],
                               mean=self.mean, std=self.std,
                               raw_images=self.raw_images[indices])

    def fingerprint(self):
        """Identifies the image count, shape and label sequence."""
        header = struct.pack('<I', len(self)) + struct.pack('<3I', *self.image_shape)
        return '%016x' % fnv1a_64(header + self.labels.astype('<u2').tobytes())


def _open(path):
    if str(path).endswith('.gz'):
        return gzip.open(path, 'rb')
    return open(path, 'rb')


def _read_idx(path, magic, dims):
    with _open(path) as f:
        buf = f.read()
    header_size = 4 + 4 * dims
    if len(buf) < header_size:
        raise FormatError('Truncated IDX header in {}'.format(path))
    found = struct.unpack('>I', buf[:4])[0]
    if found != magic:
        raise FormatError('Bad IDX magic 0x{:08x} in {}'.format(found, path))
    shape = struct.unpack('>%dI' % dims, buf[4:header_size])
    count = int(np.prod(shape))
    if len(buf) - header_size != count:
        raise FormatError('IDX payload of {} bytes does not match shape {} in {}'.format(
            len(buf) - header_size, shape, path))
    return np.frombuffer(buf, dtype=np.uint8, offset=header_size).reshape(shape)


def default_labels_path(images_path):
    path = str(images_path)
    for a, b in (('images-idx3', 'labels-idx1'), ('images.idx3', 'labels.idx1')):
        if a in path:
            return path.replace(a, b)
    raise ContractError('Cannot derive the label file of {}'.format(images_path))


def load_idx(images_path, labels_path=None):
    """Loads an MNIST-family IDX image/label file pair (optionally gzipped).

    Images come back as ``[n,1,h,w]`` floats in [0,1].

    """
    if labels_path is None:
        labels_path = default_labels_path(images_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError('{} images but {} labels'.format(len(images), len(labels)))
    logger.info('Loaded {} IDX images of {}x{} from {}'.format(
        len(images), images.shape[1], images.shape[2], images_path))
    return LabeledImageSet(images[:, None].astype(np.float32) / 255.0, labels)


CIFAR_LAYOUTS = ('cifar10', 'cifar100')


def load_cifar_binary(paths, layout='cifar10', label_kind='fine'):
    """Loads one or more CIFAR binary batch files.

    CIFAR-10 records are one label byte plus 3072 pixel bytes. CIFAR-100
    records carry a coarse and a fine label byte; ``label_kind`` picks
    which one becomes the label.

    """
    if isinstance(paths, str):
        paths = [paths]
    if layout not in CIFAR_LAYOUTS:
        raise ContractError('CIFAR layout must be `cifar10` or `cifar100`, got `{}`'.format(layout))
    if label_kind not in ('fine', 'coarse'):
        raise ContractError('label_kind must be `fine` or `coarse`')
    if layout == 'cifar10':
        if label_kind != 'fine':
            raise ContractError('CIFAR-10 records have no coarse label')
        record, label_column = CIFAR_PIXELS + 1, 0
    else:
        record = CIFAR_PIXELS + 2
        label_column = 0 if label_kind == 'coarse' else 1
    images, labels = [], []
    for path in paths:
        with _open(path) as f:
            buf = f.read()
        if not buf or len(buf) % record:
            raise FormatError('{} is not a whole number of {} records'.format(path, layout))
        rows = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_column].astype(np.int64))
        images.append(rows[:, record - CIFAR_PIXELS:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE))
        logger.info('Loaded {} CIFAR images from {}'.format(len(rows), path))
    return LabeledImageSet(np.concatenate(images).astype(np.float32) / 255.0,
                           np.concatenate(labels))


def channel_stats(dataset):
    """Per-channel mean and standard deviation of the raw images."""
    mean = dataset.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = dataset.images.std(axis=(0, 2, 3), dtype=np.float64)
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(dataset, mean=None, std=None):
    """Per-channel standardization.

    Statistics default to those of ``dataset`` itself, which should be the
    training split; pass the training statistics when normalizing a test
    split.

    """
    if dataset.normalized:
        raise ContractError('dataset is already normalized')
    if mean is None or std is None:
        mean, std = channel_stats(dataset)
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    images = (dataset.images - mean[None, :, None, None]) / std[None, :, None, None]
    return LabeledImageSet(images, dataset.labels, mean=mean, std=std,
                           raw_images=dataset.images)


def random_subset(dataset, count, seed):
    if count >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    return dataset.subset(np.sort(rng.choice(len(dataset), size=count, replace=False)))


@dataclass(frozen=True)
class Schedule:
    """Incremental generative strategy: the fraction of samples occluded
    per epoch grows linearly and stays at ``upper_bound`` from the epoch
    ``ramp * total_epochs`` on."""

    total_epochs: int
    upper_bound: float = settings.SCHEDULE_UPPER_BOUND
    ramp: float = settings.SCHEDULE_RAMP

    def __post_init__(self):
        if self.total_epochs < 1 or not 0 <= self.upper_bound <= 1 or not 0 < self.ramp <= 1:
            raise ContractError('invalid schedule {}'.format(self))


def schedule_fraction(epoch, schedule):
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError('epoch {} outside [0, {})'.format(epoch, schedule.total_epochs))
    ramp_epochs = schedule.ramp * schedule.total_epochs
    return min(schedule.upper_bound, schedule.upper_bound * epoch / ramp_epochs)


def augmented_count(fraction, n):
    """Number of samples to occlude for a fraction of ``n``; the realized
    fraction is within ``1/n`` of the requested one."""
    return int(math.floor(fraction * n + 1e-9))
