# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Small synthetic datasets shared by the test modules.

Class 0 images are bright on the left half, class 1 images on the right
half, so a tiny network separates them within a few epochs.

"""

import os
import struct

import numpy as np

from advmask_works.datasets import LabeledImageSet
from advmask_works.models import reference_spec


def synthetic_images(count=32, side=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    images = rng.uniform(0.0, 0.3, size=(count, 1, side, side))
    for image, label in zip(images, labels):
        if label:
            image[0, :, side // 2:] += 0.6
        else:
            image[0, :, :side // 2] += 0.6
    return images.astype(np.float32), labels


def synthetic_set(count=32, side=8, seed=0):
    return LabeledImageSet(*synthetic_images(count, side, seed))


def tiny_spec(dataset, num_classes=2):
    return reference_spec(dataset.image_shape, num_classes, conv_channels=(4,), dense_units=8,
                          mean=dataset.mean, std=dataset.std)


def write_idx(directory, prefix, images, labels):
    """Writes an IDX image/label pair; returns the two paths."""
    images = np.clip(np.rint(np.asarray(images).reshape(len(images), *np.shape(images)[-2:])
                             * 255.0), 0, 255).astype(np.uint8)
    images_path = os.path.join(directory, '%s-images-idx3-ubyte' % prefix)
    labels_path = os.path.join(directory, '%s-labels-idx1-ubyte' % prefix)
    with open(images_path, 'wb') as f:
        f.write(struct.pack('>IIII', 0x00000803, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, 'wb') as f:
        f.write(struct.pack('>II', 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
    return images_path, labels_path
