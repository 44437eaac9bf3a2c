# -*- coding: utf-8 -*-

import logging
from collections import namedtuple

import numpy as np

try:
    from PIL import Image
except ImportError:
    import Image


logger = logging.getLogger(__name__)


# Offsets of the crop window inside the padded image, and whether the
# crop was mirrored left to right afterwards.
Transform = namedtuple('Transform', 'top left pad flip')

IDENTITY = Transform(0, 0, 0, False)


def pad_crop(image, top, left, pad):
    """Zero-pads ``image[c,h,w]`` by ``pad`` on each side and crops the
    original size back out at ``(top, left)`` of the padded image.

    ``top == left == pad`` returns the original image.

    """
    if pad == 0:
        return image
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + h, pad:pad + w] = image
    return padded[:, top:top + h, left:left + w]


def hflip(image):
    return image[:, :, ::-1]


def basic_augment(image, rng, mode='crop-flip', pad=4):
    """Random pad-and-crop and a Bernoulli(0.5) horizontal flip.

    Returns the new image and the ``Transform`` applied, so that points
    found on the original image can be carried along.

    """
    if mode == 'none':
        return image, IDENTITY
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    flip = False
    if mode == 'crop-flip':
        flip = bool(rng.random() < 0.5)
    out = pad_crop(image, top, left, pad)
    if flip:
        out = hflip(out)
    return np.ascontiguousarray(out), Transform(int(top), int(left), pad, flip)


def transform_points(points, transform, height, width):
    """Moves ``(row, col)`` points through a ``Transform``; points that
    leave the image are dropped."""
    points = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    rows = points[:, 0] + transform.pad - transform.top
    cols = points[:, 1] + transform.pad - transform.left
    if transform.flip:
        cols = width - 1 - cols
    keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    return np.stack([rows[keep], cols[keep]], axis=1)


def to_gray_levels(plane):
    """Scales a ``[h,w]`` plane of [0,1] values to 8-bit levels."""
    return np.clip(np.rint(np.asarray(plane, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_pgm(plane, path):
    """Writes a binary (P5) PGM from a ``[h,w]`` uint8 or boolean array.

    Booleans map to 255 (true) and 0 (false).

    """
    plane = np.asarray(plane)
    if plane.dtype == bool:
        plane = plane.astype(np.uint8) * 255
    im = Image.fromarray(np.ascontiguousarray(plane, dtype=np.uint8))
    im.save(path, 'PPM')
    logger.debug('Wrote {}x{} PGM to {}'.format(plane.shape[1], plane.shape[0], path))
    return path
