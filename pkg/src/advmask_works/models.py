# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""The compact convolutional classifier and its on-disk format.

A model file is laid out as::

    b'AMDL'  u32 version (1)
    u64 length + spec descriptor (UTF-8 JSON)
    u32 blob count, then per blob: u64 byte length + float32 data

All integers and floats are little-endian; blobs follow the declaration
order of the layers (weights before bias).

"""

import json
import logging
import struct

import numpy as np

from advmask_works import autograd as ag
from advmask_works import settings
from advmask_works.exceptions import DimensionError
from advmask_works.exceptions import FormatError
from advmask_works.utils import array_checksum


logger = logging.getLogger(__name__)

MODEL_MAGIC = b'AMDL'
MODEL_VERSION = 1

LAYER_KINDS = ('conv', 'relu', 'pool', 'dense')


class ModelSpec:
    """Input shape, layer descriptors and class count of a classifier.

    ``layers`` is a sequence of dictionaries, each with a ``kind`` key:

    ``conv``
        ``channels``, ``kernel`` and ``padding``; stride is always 1.
    ``relu`` / ``pool``
        no further keys; ``pool`` is 2x2 max pooling.
    ``dense``
        ``units``. The first dense layer flattens its input.

    The softmax is implicit: ``predict()`` applies it to the last layer,
    whose width must equal ``num_classes``.

    """

    def __init__(self, input_shape, layers, num_classes, mean=None, std=None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = [dict(layer) for layer in layers]
        self.num_classes = int(num_classes)
        channels = self.input_shape[0]
        self.mean = [0.0] * channels if mean is None else [float(v) for v in mean]
        self.std = [1.0] * channels if std is None else [float(v) for v in std]
        self.shapes = self._compose()

    def _compose(self):
        """Returns the output shape of every layer; raises on mismatches."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise DimensionError('input shape must be (c, h, w), got {}'.format(self.input_shape))
        if len(self.mean) != self.input_shape[0] or len(self.std) != self.input_shape[0]:
            raise DimensionError('normalization needs one mean/std per channel')
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            kind = layer.get('kind')
            if kind not in LAYER_KINDS:
                raise DimensionError('unknown layer kind `{}`'.format(kind))
            if kind == 'conv':
                if len(shape) != 3:
                    raise DimensionError('conv layer after flattening')
                k, pad = layer['kernel'], layer.get('padding', 0)
                h, w = shape[1] + 2 * pad - k + 1, shape[2] + 2 * pad - k + 1
                if h < 1 or w < 1:
                    raise DimensionError('conv kernel {} too large for {}'.format(k, shape))
                shape = (layer['channels'], h, w)
            elif kind == 'pool':
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise DimensionError('cannot pool {}'.format(shape))
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == 'dense':
                shape = (layer['units'],)
            shapes.append(shape)
        if not shapes or len(shapes[-1]) != 1 or shapes[-1][0] != self.num_classes:
            raise DimensionError('final layer width must equal the class count {}'.format(
                self.num_classes))
        return shapes

    def parameter_shapes(self):
        shapes = []
        shape = self.input_shape
        for layer, out_shape in zip(self.layers, self.shapes):
            if layer['kind'] == 'conv':
                k = layer['kernel']
                shapes.append((layer['channels'], shape[0], k, k))
                shapes.append((layer['channels'],))
            elif layer['kind'] == 'dense':
                shapes.append((int(np.prod(shape)), layer['units']))
                shapes.append((layer['units'],))
            shape = out_shape
        return shapes

    def to_dict(self):
        return {
            'input_shape': list(self.input_shape),
            'layers': self.layers,
            'num_classes': self.num_classes,
            'mean': self.mean,
            'std': self.std,
            }

    @classmethod
    def from_dict(cls, data):
        return cls(data['input_shape'], data['layers'], data['num_classes'],
                   mean=data.get('mean'), std=data.get('std'))

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.to_dict() == other.to_dict()


def reference_spec(input_shape, num_classes, conv_channels=None, dense_units=None,
                   mean=None, std=None):
    """conv(32,3x3)-relu-pool-conv(64,3x3)-relu-pool-dense(128)-relu-dense(K)."""
    if conv_channels is None:
        conv_channels = settings.MODEL_CONV_CHANNELS
    if dense_units is None:
        dense_units = settings.MODEL_DENSE_UNITS
    layers = []
    for channels in conv_channels:
        layers.append({'kind': 'conv', 'channels': int(channels), 'kernel': 3, 'padding': 1})
        layers.append({'kind': 'relu'})
        layers.append({'kind': 'pool'})
    layers.append({'kind': 'dense', 'units': int(dense_units)})
    layers.append({'kind': 'relu'})
    layers.append({'kind': 'dense', 'units': int(num_classes)})
    return ModelSpec(input_shape, layers, num_classes, mean=mean, std=std)


class Model:
    """A ``ModelSpec`` plus its parameters as autograd leaves.

    ``history`` holds the per-epoch training record once the model has
    been through ``train_classifier()``.

    """

    def __init__(self, spec, params):
        self.spec = spec
        expected = spec.parameter_shapes()
        if [tuple(p.shape) for p in params] != expected:
            raise DimensionError('parameter shapes do not match the model spec')
        self.params = [p if isinstance(p, ag.Tensor) else ag.Tensor(p, requires_grad=True)
                       for p in params]
        self.history = []

    @classmethod
    def initialize(cls, spec, rng, zero_final=False):
        """Fan-in scaled uniform weights, zero biases."""
        params = []
        shapes = spec.parameter_shapes()
        for i, shape in enumerate(shapes):
            if len(shape) == 1 or (zero_final and i >= len(shapes) - 2):
                params.append(np.zeros(shape, dtype=np.float32))
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
        return cls(spec, params)

    @property
    def mean(self):
        return np.asarray(self.spec.mean, dtype=np.float32)

    @property
    def std(self):
        return np.asarray(self.spec.std, dtype=np.float32)

    def frozen(self):
        """A view of this model whose parameters take no gradient."""
        model = Model.__new__(Model)
        model.spec = self.spec
        model.params = [ag.Tensor(p.data) for p in self.params]
        model.history = self.history
        return model

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def forward(self, x):
        """Logits for a batch ``x[n,c,h,w]``; the input may be a Tensor."""
        x = ag.as_tensor(x)
        if tuple(x.shape[1:]) != self.spec.input_shape or len(x.shape) != 4:
            raise DimensionError('input {} does not match model input {}'.format(
                x.shape, self.spec.input_shape))
        params = iter(self.params)
        flat = False
        for layer in self.spec.layers:
            kind = layer['kind']
            if kind == 'conv':
                x = ag.conv2d(x, next(params), stride=1, padding=layer.get('padding', 0))
                x = ag.add_bias(x, next(params))
            elif kind == 'relu':
                x = ag.relu(x)
            elif kind == 'pool':
                x = ag.maxpool2(x)
            elif kind == 'dense':
                if not flat:
                    x = ag.reshape(x, (x.shape[0], -1))
                    flat = True
                x = ag.add_bias(ag.matmul(x, next(params)), next(params))
        return x

    def checksum(self):
        return array_checksum(p.data for p in self.params)


def predict(model, image):
    """Class probabilities for one normalized image ``[c,h,w]``."""
    image = np.asarray(image.data if isinstance(image, ag.Tensor) else image)
    if tuple(image.shape) != model.spec.input_shape:
        raise DimensionError('image {} does not match model input {}'.format(
            image.shape, model.spec.input_shape))
    logits = model.frozen().forward(image[None])
    return ag.softmax(logits.data.astype(np.float64))[0]


def predict_batch(model, images, batch_size=256):
    """Argmax labels for normalized images ``[n,c,h,w]``."""
    frozen = model.frozen()
    labels = []
    for start in range(0, len(images), batch_size):
        logits = frozen.forward(images[start:start + batch_size])
        labels.append(logits.data.argmax(axis=1))
    if not labels:
        return np.zeros((0,), dtype=np.int64)
    return np.concatenate(labels)


def save_model(model, path):
    descriptor = json.dumps(model.spec.to_dict(), sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack('<I', MODEL_VERSION))
        f.write(struct.pack('<Q', len(descriptor)))
        f.write(descriptor)
        f.write(struct.pack('<I', len(model.params)))
        for p in model.params:
            blob = np.ascontiguousarray(p.data, dtype='<f4').tobytes()
            f.write(struct.pack('<Q', len(blob)))
            f.write(blob)
    logger.info('Saved model to {} (checksum {})'.format(path, model.checksum()[:16]))


def _take(buf, offset, size, what):
    if offset + size > len(buf):
        raise FormatError('Truncated model file while reading {}'.format(what))
    return buf[offset:offset + size], offset + size


def load_model(path):
    with open(path, 'rb') as f:
        buf = f.read()
    magic, offset = _take(buf, 0, 4, 'magic')
    if magic != MODEL_MAGIC:
        raise FormatError('Not a model file: bad magic {!r}'.format(magic))
    raw, offset = _take(buf, offset, 4, 'version')
    version = struct.unpack('<I', raw)[0]
    if version != MODEL_VERSION:
        raise FormatError('Unsupported model file version {}'.format(version))
    raw, offset = _take(buf, offset, 8, 'descriptor length')
    raw, offset = _take(buf, offset, struct.unpack('<Q', raw)[0], 'descriptor')
    try:
        spec = ModelSpec.from_dict(json.loads(raw.decode('utf-8')))
    except (ValueError, KeyError, TypeError, DimensionError) as e:
        raise FormatError('Corrupt model descriptor: {}'.format(e))
    raw, offset = _take(buf, offset, 4, 'blob count')
    shapes = spec.parameter_shapes()
    if struct.unpack('<I', raw)[0] != len(shapes):
        raise FormatError('Blob count does not match the model descriptor')
    params = []
    for shape in shapes:
        raw, offset = _take(buf, offset, 8, 'blob length')
        length = struct.unpack('<Q', raw)[0]
        if length != 4 * int(np.prod(shape)):
            raise FormatError('Blob length {} does not fit shape {}'.format(length, shape))
        raw, offset = _take(buf, offset, length, 'blob')
        params.append(np.frombuffer(raw, dtype='<f4').reshape(shape).astype(np.float32))
    if offset != len(buf):
        raise FormatError('Trailing bytes after the last blob')
    model = Model(spec, params)
    logger.debug('Loaded model from {} (checksum {})'.format(path, model.checksum()[:16]))
    return model
