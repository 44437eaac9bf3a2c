# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Structured occlusion masks built around points of interest.

A mask is a boolean ``[h,w]`` grid where ``True`` keeps a pixel and
``False`` removes it. Squares of side ``l`` centered on points are removed
until the removed area reaches a sampled ratio ``p``; no two squares may
share more than ``ceil(min(l_i, l_j)**2 * o)`` pixels.

The point-free Cutout, GridMask and Hide-and-Seek masks are drawn here
too, for comparison runs.

"""

import logging
import math
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from advmask_works import autograd as ag
from advmask_works import settings
from advmask_works.datasets import augmented_count
from advmask_works.datasets import schedule_fraction
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import DimensionError
from advmask_works.images import transform_points
from advmask_works.utils import rng_for


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentParams:
    l_min: int
    l_max: int
    p_min: float
    p_max: float
    o_max: float

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max:
            raise ContractError('square length range must satisfy 1 <= l_min <= l_max')
        if not 0 <= self.p_min <= self.p_max <= 1:
            raise ContractError('mask ratio range must satisfy 0 <= p_min <= p_max <= 1')
        if not 0 <= self.o_max <= 1:
            raise ContractError('overlap ratio bound must lie in [0, 1]')

    @classmethod
    def preset(cls, name):
        try:
            return cls(*settings.AUGMENT_PRESETS[name])
        except KeyError:
            raise ContractError('Unknown augmentation preset `{}`'.format(name))


class Square(namedtuple('Square', 'row col side')):
    """A square of side ``side`` whose center pixel is ``(row, col)``."""

    def extent(self, height, width):
        """Half-open ``(r0, r1, c0, c1)`` bounds clipped to the image."""
        r0 = self.row - self.side // 2
        c0 = self.col - self.side // 2
        return (max(r0, 0), min(r0 + self.side, height),
                max(c0, 0), min(c0 + self.side, width))


@dataclass
class AugMask:
    grid: np.ndarray
    squares: tuple
    achieved_p: float
    chosen_o: float
    target_p: float = 0.0
    under_ratio: bool = False

    @property
    def height(self):
        return self.grid.shape[0]

    @property
    def width(self):
        return self.grid.shape[1]


def pair_overlap(a, b, height, width):
    """Exact intersection area of two squares clipped to ``height x width``."""
    ar0, ar1, ac0, ac1 = a.extent(height, width)
    br0, br1, bc0, bc1 = b.extent(height, width)
    rows = min(ar1, br1) - max(ar0, br0)
    cols = min(ac1, bc1) - max(ac0, bc0)
    return max(rows, 0) * max(cols, 0)


def overlap_bound(a, b, o):
    return math.ceil(min(a.side, b.side) ** 2 * o)


def mask_ratio(mask):
    return float((~mask.grid).sum()) / mask.grid.size


def generate_mask(pois, params, width, height, rng):
    """Removes squares around shuffled points until the sampled ratio is met.

    The overlap ratio and the target ratio are drawn once per mask, every
    square gets its own side length. A mask whose points ran out before
    ``p_min`` was reached comes back with ``under_ratio`` set.

    """
    pois = np.asarray(pois, dtype=np.int64).reshape(-1, 2)
    if len(pois) == 0:
        raise ContractError('Cannot generate a mask from an empty point set')
    if (pois[:, 0].min() < 0 or pois[:, 0].max() >= height
            or pois[:, 1].min() < 0 or pois[:, 1].max() >= width):
        raise ContractError('Point outside the {}x{} image'.format(height, width))

    chosen_o = float(rng.uniform(0.0, params.o_max))
    target_p = float(rng.uniform(params.p_min, params.p_max))
    target_pixels = target_p * height * width
    grid = np.ones((height, width), dtype=bool)
    removed = 0
    placed = []

    for index in rng.permutation(len(pois)):
        if removed >= target_pixels:
            break
        side = int(rng.integers(params.l_min, params.l_max + 1))
        square = Square(int(pois[index, 0]), int(pois[index, 1]), side)
        if any(pair_overlap(square, other, height, width) > overlap_bound(square, other, chosen_o)
               for other in placed):
            continue
        r0, r1, c0, c1 = square.extent(height, width)
        removed += int(grid[r0:r1, c0:c1].sum())
        grid[r0:r1, c0:c1] = False
        placed.append(square)

    achieved_p = removed / float(height * width)
    mask = AugMask(grid, tuple(placed), achieved_p, chosen_o, target_p,
                   under_ratio=achieved_p < params.p_min)
    if mask.under_ratio:
        logger.debug('Points exhausted at ratio {:.4f} below p_min {}'.format(
            achieved_p, params.p_min))
    return mask


def attack_point_mask(pois, width, height):
    """Removes exactly the given points (1x1 squares, no ratio control)."""
    pois = np.asarray(pois, dtype=np.int64).reshape(-1, 2)
    return squares_mask([Square(int(r), int(c), 1) for r, c in pois], height, width)


@dataclass(frozen=True)
class BaselineParams:
    """Parameters of the occlusion baselines that need no points."""

    cutout_length: int = settings.CUTOUT_LENGTH
    grid_d_min: int = settings.GRIDMASK_D_RANGE[0]
    grid_d_max: int = settings.GRIDMASK_D_RANGE[1]
    grid_ratio: float = settings.GRIDMASK_RATIO
    has_patch: int = settings.HAS_PATCH
    has_prob: float = settings.HAS_PROB

    def __post_init__(self):
        if self.cutout_length < 1:
            raise ContractError('cutout length must be at least 1')
        if not 1 <= self.grid_d_min <= self.grid_d_max:
            raise ContractError('grid period range must satisfy 1 <= d_min <= d_max')
        if not 0 < self.grid_ratio <= 1:
            raise ContractError('grid ratio must lie in (0, 1]')
        if self.has_patch < 1:
            raise ContractError('hide-and-seek patch side must be at least 1')
        if not 0 <= self.has_prob <= 1:
            raise ContractError('hide-and-seek probability must lie in [0, 1]')


def squares_mask(squares, height, width):
    grid = np.ones((height, width), dtype=bool)
    for square in squares:
        r0, r1, c0, c1 = square.extent(height, width)
        grid[r0:r1, c0:c1] = False
    return AugMask(grid, tuple(squares), float((~grid).sum()) / grid.size, 0.0)


def _square_at(top, left, side):
    return Square(top + side // 2, left + side // 2, side)


def cutout_mask(length, width, height, rng):
    """One square of side ``length`` around a uniformly drawn center."""
    square = Square(int(rng.integers(height)), int(rng.integers(width)), length)
    return squares_mask([square], height, width)


def grid_mask(d_min, d_max, ratio, width, height, rng):
    """Squares of side ``ceil(ratio * d)`` repeated every ``d`` pixels.

    The period ``d`` and the grid offset are drawn per mask.

    """
    d = int(rng.integers(d_min, d_max + 1))
    side = min(max(int(math.ceil(ratio * d)), 1), d)
    dy, dx = int(rng.integers(d)), int(rng.integers(d))
    squares = [_square_at(top, left, side)
               for top in range(dy - d, height, d)
               for left in range(dx - d, width, d)
               if top + side > 0 and left + side > 0]
    return squares_mask(squares, height, width)


def hide_and_seek_mask(patch, prob, width, height, rng):
    """Hides each cell of a ``patch``-sized tiling with probability ``prob``."""
    squares = [_square_at(top, left, patch)
               for top in range(0, height, patch)
               for left in range(0, width, patch)]
    hidden = rng.random(len(squares)) < prob
    return squares_mask([s for s, h in zip(squares, hidden) if h], height, width)


def baseline_mask(method, baseline, width, height, rng):
    if method == 'cutout':
        return cutout_mask(baseline.cutout_length, width, height, rng)
    if method == 'gridmask':
        return grid_mask(baseline.grid_d_min, baseline.grid_d_max, baseline.grid_ratio,
                         width, height, rng)
    if method == 'has':
        return hide_and_seek_mask(baseline.has_patch, baseline.has_prob, width, height, rng)
    raise ContractError('Unknown occlusion baseline `{}`'.format(method))


def apply_mask(image, mask):
    """``x * M``: zeroes removed cells across all channels.

    Accepts a numpy array or a ``Tensor`` of shape ``[c,h,w]``.

    """
    if isinstance(image, ag.Tensor):
        keep = ag.Tensor(mask.grid[None].astype(image.data.dtype))
        return ag.broadcast_mul_channels(image, keep)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != mask.grid.shape:
        raise DimensionError('Cannot apply a {} mask to an image of shape {}'.format(
            mask.grid.shape, image.shape))
    return image * mask.grid[None].astype(image.dtype)


def fill_removed(image, mask, fill):
    """Sets removed cells of a raw ``[c,h,w]`` image to the per-channel ``fill``.

    With the training mean as ``fill`` this is what a zeroed normalized
    image looks like in raw pixel units.

    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != mask.grid.shape:
        raise DimensionError('Cannot apply a {} mask to an image of shape {}'.format(
            mask.grid.shape, image.shape))
    fill = np.asarray(fill, dtype=image.dtype).reshape(-1, 1, 1)
    return np.where(mask.grid[None], image, fill)


def harris_response(image, k=0.05, sigma=1.0):
    """Harris corner response of the channel mean of ``image[c,h,w]``."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    dy = ndimage.sobel(gray, axis=0, mode='nearest')
    dx = ndimage.sobel(gray, axis=1, mode='nearest')
    ixx = ndimage.gaussian_filter(dx * dx, sigma)
    iyy = ndimage.gaussian_filter(dy * dy, sigma)
    ixy = ndimage.gaussian_filter(dx * dy, sigma)
    return ixx * iyy - ixy * ixy - k * (ixx + iyy) ** 2


def baseline_points(mode, image, count, rng):
    """Point sets for the random-points and corner-points baselines.

    ``corner`` returns up to ``count`` pixels with the strongest positive
    Harris response; an image without corners falls back to random points.

    """
    c, h, w = np.shape(image)
    if not 0 <= count <= h * w:
        raise ContractError('count must lie in [0, {}]'.format(h * w))
    if mode == 'corner':
        response = harris_response(image)
        positive = np.flatnonzero(response.reshape(-1) > 1e-12)
        if len(positive):
            # equal responses keep raster order
            order = positive[np.argsort(-response.reshape(-1)[positive], kind='stable')]
            flat = order[:count]
            return np.stack(np.unravel_index(flat, (h, w)), axis=1)
        logger.warning('No corners found, falling back to random points')
        mode = 'random'
    if mode != 'random':
        raise ContractError('Unknown point selection mode `{}`'.format(mode))
    flat = rng.choice(h * w, size=count, replace=False)
    return np.stack(np.unravel_index(flat, (h, w)), axis=1)


class AugmentHook:
    """Occludes training samples for ``train_classifier()``.

    ``method`` selects how the masks are built:

    ``advmask``
        cached attack points, squares via ``generate_mask()``
    ``random`` / ``corner``
        baseline point sets of the same size as the cached set for the
        image (or ``point_count`` without a cache), squares via
        ``generate_mask()``
    ``attack-points``
        cached attack points removed as they are
    ``cutout`` / ``gridmask`` / ``has``
        point-free baselines drawn from ``baseline`` via ``baseline_mask()``

    Every (seed, epoch, index) triple owns its random stream, so the
    masks do not depend on batch order or thread count.

    """

    POINT_METHODS = ('advmask', 'random', 'corner', 'attack-points')
    BASELINE_METHODS = ('cutout', 'gridmask', 'has')
    METHODS = POINT_METHODS + BASELINE_METHODS

    def __init__(self, method, params, schedule, cache=None, raw_images=None,
                 point_count=settings.BASELINE_POINT_COUNT, seed=0, baseline=None):
        if method not in self.METHODS:
            raise ContractError('Unknown augmentation method `{}`'.format(method))
        if method in ('advmask', 'attack-points') and cache is None:
            raise ContractError('Method `{}` needs a mask cache'.format(method))
        if method == 'corner' and raw_images is None:
            raise ContractError('Method `corner` needs the raw images')
        self.method = method
        self.params = params
        self.baseline = baseline if baseline is not None else BaselineParams()
        self.schedule = schedule
        self.cache = cache
        self.raw_images = raw_images
        self.point_count = point_count
        self.seed = seed
        self.under_ratio = 0
        self.generated = 0
        self.realized = []
        self._corners = {}

    def select(self, epoch, n, rng):
        """A fresh uniform subset of the scheduled size for this epoch."""
        count = augmented_count(schedule_fraction(epoch, self.schedule), n)
        chosen = np.zeros(n, dtype=bool)
        chosen[rng.choice(n, size=count, replace=False)] = True
        self.realized.append(count / float(n))
        return chosen

    def _count_for(self, index):
        if self.cache is not None and index in self.cache.pois:
            return max(len(self.cache.pois[index]), 1)
        return self.point_count

    def points_for(self, index, height, width, rng):
        if self.method in ('advmask', 'attack-points'):
            return self.cache.pois.get(index, np.zeros((0, 2), dtype=np.int64))
        count = min(self._count_for(index), height * width)
        if self.method == 'random':
            return baseline_points('random', np.zeros((1, height, width)), count, rng)
        if index not in self._corners:
            self._corners[index] = baseline_points('corner', self.raw_images[index], count, rng)
        return self._corners[index]

    def __call__(self, image, index, epoch, transform):
        rng = rng_for(self.seed, epoch, index)
        _, height, width = image.shape
        if self.method in self.BASELINE_METHODS:
            self.generated += 1
            return apply_mask(image, baseline_mask(self.method, self.baseline, width, height, rng))
        points = transform_points(self.points_for(index, height, width, rng),
                                  transform, height, width)
        if len(points) == 0:
            self.under_ratio += 1
            return image
        if self.method == 'attack-points':
            mask = attack_point_mask(points, width, height)
        else:
            mask = generate_mask(points, self.params, width, height, rng)
            self.generated += 1
            if mask.under_ratio:
                self.under_ratio += 1
        return apply_mask(image, mask)
