# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Application defaults.

Every value can be overridden by a user settings module whose dotted path
is given in the ``ADVMASK_SETTINGS_MODULE`` environment variable. Config
files and command-line flags override both.

"""

import importlib
import os


_settings_module = os.environ.get('ADVMASK_SETTINGS_MODULE')
if _settings_module:
    settings = importlib.import_module(_settings_module)
else:
    settings = object()


# Sparse attack. Epsilon and beta are in raw [0,1] pixel units.
ATTACK_EPSILON = getattr(settings, 'ATTACK_EPSILON', 16 / 255.)
ATTACK_ALPHA_MIN = getattr(settings, 'ATTACK_ALPHA_MIN', 0.1)
# 100 for 32x32-class inputs, 5 for 64x64 inputs
ATTACK_ALPHA_MAX = getattr(settings, 'ATTACK_ALPHA_MAX', 100.0)
ATTACK_ETA = getattr(settings, 'ATTACK_ETA', 0.1)
ATTACK_C = getattr(settings, 'ATTACK_C', 1.0)
ATTACK_GAMMA = getattr(settings, 'ATTACK_GAMMA', 5.0)
ATTACK_MU = getattr(settings, 'ATTACK_MU', 1.0)
# None means epsilon / 10
ATTACK_BETA = getattr(settings, 'ATTACK_BETA', None)
ATTACK_ITERS = getattr(settings, 'ATTACK_ITERS', 500)
ATTACK_INIT_ITERS = getattr(settings, 'ATTACK_INIT_ITERS', 100)
ATTACK_ENCODER_LR = getattr(settings, 'ATTACK_ENCODER_LR', 0.01)

# Augmentation mask generation: (l_min, l_max, p_min, p_max, o_max)
AUGMENT_PRESETS = getattr(settings, 'AUGMENT_PRESETS', {
    'cifar10': (2, 15, 0.2, 0.4, 0.1),
    'cifar100': (5, 20, 0.06, 0.5, 0.2),
    })
AUGMENT_DEFAULT_PRESET = getattr(settings, 'AUGMENT_DEFAULT_PRESET', 'cifar10')

# Number of points for the random/corner baselines when no cache is given
BASELINE_POINT_COUNT = getattr(settings, 'BASELINE_POINT_COUNT', 100)

# Point-free occlusion baselines
CUTOUT_LENGTH = getattr(settings, 'CUTOUT_LENGTH', 16)
# grid period range and the removed share of each period
GRIDMASK_D_RANGE = getattr(settings, 'GRIDMASK_D_RANGE', (24, 32))
GRIDMASK_RATIO = getattr(settings, 'GRIDMASK_RATIO', 0.4)
HAS_PATCH = getattr(settings, 'HAS_PATCH', 8)
HAS_PROB = getattr(settings, 'HAS_PROB', 0.5)

# Incremental generative strategy
SCHEDULE_UPPER_BOUND = getattr(settings, 'SCHEDULE_UPPER_BOUND', 0.8)
# Fraction of the epochs after which the upper bound is reached
SCHEDULE_RAMP = getattr(settings, 'SCHEDULE_RAMP', 0.5)

# Classifier training
TRAIN_EPOCHS = getattr(settings, 'TRAIN_EPOCHS', 10)
TRAIN_BATCH_SIZE = getattr(settings, 'TRAIN_BATCH_SIZE', 64)
TRAIN_LEARNING_RATE = getattr(settings, 'TRAIN_LEARNING_RATE', 0.05)
TRAIN_MOMENTUM = getattr(settings, 'TRAIN_MOMENTUM', 0.9)
TRAIN_WEIGHT_DECAY = getattr(settings, 'TRAIN_WEIGHT_DECAY', 5e-4)
TRAIN_LR_STEP = getattr(settings, 'TRAIN_LR_STEP', 5)
TRAIN_LR_GAMMA = getattr(settings, 'TRAIN_LR_GAMMA', 0.1)
TRAIN_PAD = getattr(settings, 'TRAIN_PAD', 4)

# Reference architecture
MODEL_CONV_CHANNELS = getattr(settings, 'MODEL_CONV_CHANNELS', (32, 64))
MODEL_DENSE_UNITS = getattr(settings, 'MODEL_DENSE_UNITS', 128)

# 0 means one worker per logical core
THREADS = getattr(settings, 'THREADS', 0)

SEED = getattr(settings, 'SEED', 0)
