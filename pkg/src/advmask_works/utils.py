# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

import hashlib
import json

import numpy as np

from advmask_works.exceptions import ConfigOptionError


FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
_MASK64 = 0xffffffffffffffff


def get_range_from_string(value, kind=int):
    """Returns a (LOW, HIGH) tuple.

    Accepts a string in the form LOW-HIGH, or a single number for LOW == HIGH.

    Raises ConfigOptionError on invalid ranges.

    """
    if isinstance(value, (tuple, list)):
        bits = list(value)
    elif isinstance(value, str):
        bits = value.split('-', 1) if '-' in value else [value, value]
    else:
        raise ConfigOptionError('range must be a string of the form LOW-HIGH')
    if len(bits) != 2:
        raise ConfigOptionError('range must be a string of the form LOW-HIGH')
    try:
        low = kind(bits[0])
        high = kind(bits[1])
    except (TypeError, ValueError):
        raise ConfigOptionError('range\'s LOW and HIGH must be of type %s' % kind.__name__)
    if low > high:
        raise ConfigOptionError('range LOW must not exceed HIGH: %s' % (value,))
    return low, high


def get_index_list_from_string(value):
    """Returns a list of integers from a comma separated string."""
    if isinstance(value, (tuple, list)):
        return [int(v) for v in value]
    try:
        return [int(v) for v in str(value).split(',') if v.strip()]
    except ValueError:
        raise ConfigOptionError('indices must be a comma separated list of integers')


def fnv1a_64(data, value=FNV_OFFSET):
    """64-bit FNV-1a hash of ``data`` (bytes-like)."""
    for byte in bytes(data):
        value ^= byte
        value = (value * FNV_PRIME) & _MASK64
    return value


def fingerprint(obj):
    """Stable hex fingerprint of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return '%016x' % fnv1a_64(blob)


def array_checksum(arrays):
    """Hex SHA-256 over the little-endian float32 bytes of ``arrays``."""
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype='<f4').tobytes())
    return digest.hexdigest()


def rng_for(seed, *keys):
    """Independent generator for (seed, key...), the same under any thread count."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])
