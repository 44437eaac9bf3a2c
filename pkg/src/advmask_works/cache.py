# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Per-image attack points, persisted between mask generation and training.

Binary layout, little-endian throughout::

    b'AMSK'  u32 version (1)  u32 image_count
    per image: u32 image_index  u32 poi_count  poi_count x (u16 row, u16 col)
    u64 FNV-1a checksum of all prior bytes

The fingerprints tying a cache to its model, attack configuration and
dataset live in a JSON sidecar next to it, ``<path>.meta.json``.

"""

import json
import logging
import struct

import numpy as np

from advmask_works.exceptions import FormatError
from advmask_works.exceptions import StaleCacheError
from advmask_works.utils import fnv1a_64


logger = logging.getLogger(__name__)

CACHE_MAGIC = b'AMSK'
CACHE_VERSION = 1
META_SCHEMA = 1


class MaskCache:

    def __init__(self, pois=None, model_checksum='', config_fingerprint='',
                 dataset_fingerprint='', image_count=None):
        self.pois = {}
        for index, points in (pois or {}).items():
            self.pois[int(index)] = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        self.model_checksum = model_checksum
        self.config_fingerprint = config_fingerprint
        self.dataset_fingerprint = dataset_fingerprint
        # size of the dataset the indices refer to
        self.image_count = image_count

    def __len__(self):
        return len(self.pois)

    def __eq__(self, other):
        if not isinstance(other, MaskCache) or self.meta() != other.meta():
            return False
        if sorted(self.pois) != sorted(other.pois):
            return False
        return all(np.array_equal(self.pois[i], other.pois[i]) for i in self.pois)

    def meta(self):
        return {
            'schema': META_SCHEMA,
            'model_checksum': self.model_checksum,
            'config_fingerprint': self.config_fingerprint,
            'dataset_fingerprint': self.dataset_fingerprint,
            'image_count': self.image_count,
            }

    def validate(self, height, width):
        """Raises FormatError for out-of-range indices or coordinates."""
        for index, points in self.pois.items():
            if self.image_count is not None and not 0 <= index < self.image_count:
                raise FormatError('Cache index {} outside the dataset'.format(index))
            if len(points) and (points.min() < 0 or points[:, 0].max() >= height
                                or points[:, 1].max() >= width):
                raise FormatError('Cache point outside the image for index {}'.format(index))

    def check(self, model_checksum=None, config_fingerprint=None, dataset_fingerprint=None):
        """Raises StaleCacheError if any given fingerprint differs."""
        for name, attr, expected in (('model', 'model_checksum', model_checksum),
                                     ('attack config', 'config_fingerprint', config_fingerprint),
                                     ('dataset', 'dataset_fingerprint', dataset_fingerprint)):
            found = getattr(self, attr)
            if expected is not None and found != expected:
                raise StaleCacheError('Mask cache was built for another {} ({} != {})'.format(
                    name, found, expected))


def encode_cache(cache):
    chunks = [CACHE_MAGIC, struct.pack('<II', CACHE_VERSION, len(cache.pois))]
    for index in sorted(cache.pois):
        points = cache.pois[index]
        chunks.append(struct.pack('<II', index, len(points)))
        chunks.append(np.ascontiguousarray(points, dtype='<u2').tobytes())
    body = b''.join(chunks)
    return body + struct.pack('<Q', fnv1a_64(body))


def decode_cache(buf):
    if len(buf) < 20:
        raise FormatError('Truncated mask cache')
    body, tail = buf[:-8], buf[-8:]
    if body[:4] != CACHE_MAGIC:
        raise FormatError('Not a mask cache: bad magic {!r}'.format(body[:4]))
    if struct.unpack('<Q', tail)[0] != fnv1a_64(body):
        raise FormatError('Mask cache checksum mismatch')
    version, count = struct.unpack('<II', body[4:12])
    if version != CACHE_VERSION:
        raise FormatError('Unsupported mask cache version {}'.format(version))
    offset = 12
    pois = {}
    for _ in range(count):
        if offset + 8 > len(body):
            raise FormatError('Truncated mask cache record')
        index, n = struct.unpack('<II', body[offset:offset + 8])
        offset += 8
        if offset + 4 * n > len(body):
            raise FormatError('Truncated point list for image {}'.format(index))
        points = np.frombuffer(body, dtype='<u2', count=2 * n, offset=offset)
        pois[index] = points.reshape(-1, 2).astype(np.int64)
        offset += 4 * n
    if offset != len(body):
        raise FormatError('Trailing bytes in mask cache')
    return pois


def meta_path(path):
    return '{}.meta.json'.format(path)


def save_mask_cache(cache, path):
    blob = encode_cache(cache)
    with open(path, 'wb') as f:
        f.write(blob)
    meta = cache.meta()
    meta['checksum'] = '%016x' % struct.unpack('<Q', blob[-8:])[0]
    with open(meta_path(path), 'w') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('Saved mask cache for {} images to {}'.format(len(cache), path))


def load_mask_cache(path, model_checksum=None, config_fingerprint=None,
                    dataset_fingerprint=None):
    """Loads a cache, checking its checksum and the given fingerprints.

    Raises FormatError on corrupt bytes and StaleCacheError when the cache
    belongs to another model, attack configuration or dataset.

    """
    with open(path, 'rb') as f:
        blob = f.read()
    pois = decode_cache(blob)
    try:
        with open(meta_path(path)) as f:
            meta = json.load(f)
    except (IOError, ValueError) as e:
        raise FormatError('Unreadable mask cache metadata for {}: {}'.format(path, e))
    if meta.get('schema') != META_SCHEMA:
        raise FormatError('Unsupported mask cache metadata schema {}'.format(meta.get('schema')))
    trailer = '%016x' % struct.unpack('<Q', blob[-8:])[0]
    if meta.get('checksum') != trailer:
        raise StaleCacheError('Mask cache metadata does not describe {} (checksum {} != {})'.format(
            path, meta.get('checksum'), trailer))
    cache = MaskCache(pois, meta.get('model_checksum', ''), meta.get('config_fingerprint', ''),
                      meta.get('dataset_fingerprint', ''), meta.get('image_count'))
    cache.check(model_checksum, config_fingerprint, dataset_fingerprint)
    logger.debug('Loaded mask cache for {} images from {}'.format(len(cache), path))
    return cache
