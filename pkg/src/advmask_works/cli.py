# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Command-line entry points.

Usage::

    advmask COMMAND [--config PATH] [--seed N] [--threads N] [--out DIR]
                    [--set KEY=VALUE ...] [--verbose]

Commands: train-target, gen-masks, preview, train, evaluate, report.

Option values come from the command's defaults, then the config file,
then ``--set`` and the dedicated flags. Exit status is 0 on success, 2 on
usage or input errors and 3 when a mask cache or model does not match
what it is used with.

"""

import argparse
import glob
import logging
import os
import sys

import numpy as np

from advmask_works import get_version
from advmask_works import settings
from advmask_works.attack import AttackConfig
from advmask_works.attack import attack_dataset
from advmask_works.attack import attack_metrics
from advmask_works.augment import AugMask
from advmask_works.augment import AugmentHook
from advmask_works.augment import AugmentParams
from advmask_works.augment import BaselineParams
from advmask_works.augment import fill_removed
from advmask_works.augment import generate_mask
from advmask_works.cache import MaskCache
from advmask_works.cache import load_mask_cache
from advmask_works.cache import save_mask_cache
from advmask_works.datasets import CIFAR_LAYOUTS
from advmask_works.datasets import Schedule
from advmask_works.datasets import channel_stats
from advmask_works.datasets import load_cifar_binary
from advmask_works.datasets import load_idx
from advmask_works.datasets import normalize
from advmask_works.datasets import random_subset
from advmask_works.exceptions import AdvMaskWorksError
from advmask_works.exceptions import ConfigOptionError
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import StaleCacheError
from advmask_works.images import save_pgm
from advmask_works.images import to_gray_levels
from advmask_works.models import load_model
from advmask_works.models import predict_batch
from advmask_works.models import reference_spec
from advmask_works.models import save_model
from advmask_works.reports import merge_runs
from advmask_works.reports import read_run
from advmask_works.reports import write_csv
from advmask_works.reports import write_json
from advmask_works.training import TrainConfig
from advmask_works.training import evaluate
from advmask_works.training import train_classifier
from advmask_works.utils import get_index_list_from_string
from advmask_works.utils import get_range_from_string
from advmask_works.utils import rng_for


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STALE = 3


# Option schemas. The type of each default decides how values are parsed.

COMMON_OPTIONS = {
    'seed': settings.SEED,
    'threads': settings.THREADS,
    'out': 'out',
    }

DATA_OPTIONS = {
    'format': 'idx',
    'train_images': '',
    'train_labels': '',
    'test_images': '',
    'test_labels': '',
    'label_kind': 'fine',
    'subset': 0,
    'subset_seed': 0,
    }

TRAIN_OPTIONS = {
    'epochs': settings.TRAIN_EPOCHS,
    'batch_size': settings.TRAIN_BATCH_SIZE,
    'learning_rate': settings.TRAIN_LEARNING_RATE,
    'momentum': settings.TRAIN_MOMENTUM,
    'weight_decay': settings.TRAIN_WEIGHT_DECAY,
    'lr_step': settings.TRAIN_LR_STEP,
    'lr_gamma': settings.TRAIN_LR_GAMMA,
    'basic_augment': 'crop-flip',
    'pad': settings.TRAIN_PAD,
    'conv_channels': ','.join(str(c) for c in settings.MODEL_CONV_CHANNELS),
    'dense_units': settings.MODEL_DENSE_UNITS,
    'model_label': 'compact-cnn',
    }

ATTACK_OPTIONS = {
    'epsilon': settings.ATTACK_EPSILON,
    'alpha_min': settings.ATTACK_ALPHA_MIN,
    'alpha_max': settings.ATTACK_ALPHA_MAX,
    'eta': settings.ATTACK_ETA,
    'C': settings.ATTACK_C,
    'gamma': settings.ATTACK_GAMMA,
    'mu': settings.ATTACK_MU,
    # 0 means epsilon / 10
    'beta': 0.0,
    'iters': settings.ATTACK_ITERS,
    'init_iters': settings.ATTACK_INIT_ITERS,
    'encoder_lr': settings.ATTACK_ENCODER_LR,
    }

MASK_OPTIONS = {
    'preset': settings.AUGMENT_DEFAULT_PRESET,
    # empty values fall back to the preset
    'l_range': '',
    'p_range': '',
    'o_max': '',
    }

BASELINE_OPTIONS = {
    'cutout_length': settings.CUTOUT_LENGTH,
    'grid_d_range': '%d-%d' % tuple(settings.GRIDMASK_D_RANGE),
    'grid_ratio': settings.GRIDMASK_RATIO,
    'has_patch': settings.HAS_PATCH,
    'has_prob': settings.HAS_PROB,
    }


def _schema(*parts):
    options = {}
    for part in parts:
        options.update(part)
    return options


class RunConfig:
    """Validated options of one command.

    Every key must be part of ``DEFAULT_OPTIONS``, and the final dictionary
    contains all the supported options with a default or a user-defined value.

    """

    def __init__(self, command, default_options):
        self.command = command
        self.DEFAULT_OPTIONS = default_options
        self.options = default_options.copy()
        self.origin = dict((key, 'default') for key in default_options)

    def update(self, options, origin):
        for key, value in options.items():
            if key not in self.DEFAULT_OPTIONS:
                raise ConfigOptionError('Invalid option `%s` for command `%s`' % (key, self.command))
            self.options[key] = coerce_value(key, value, self.DEFAULT_OPTIONS[key])
            self.origin[key] = origin

    def __getitem__(self, key):
        return self.options[key]

    def path(self, key):
        """Resolves a file option against the ``out`` directory."""
        value = self.options[key]
        if not value or os.path.isabs(value):
            return value
        return os.path.join(self.options['out'], value)

    def log(self):
        for key in sorted(self.options):
            logger.info('{} = {!r} ({})'.format(key, self.options[key], self.origin[key]))


def coerce_value(key, value, default):
    if not isinstance(value, str):
        return value
    value = value.strip()
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered not in ('1', '0', 'true', 'false', 'yes', 'no', 'on', 'off'):
                raise ValueError(value)
            return lowered in ('1', 'true', 'yes', 'on')
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            if '/' in value:
                numerator, denominator = value.split('/', 1)
                return float(numerator) / float(denominator)
            return float(value)
    except (ValueError, ZeroDivisionError):
        raise ConfigOptionError('Invalid value `%s` for option `%s`' % (value, key))
    return value


def read_config_file(path):
    """Parses ``key = value`` lines; ``#`` starts a comment."""
    options = {}
    with open(path) as f:
        for number, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigOptionError('%s:%d: expected `key = value`' % (path, number))
            key, value = line.split('=', 1)
            options[key.strip()] = value.strip()
    return options


def parse_overrides(pairs):
    options = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigOptionError('--set expects KEY=VALUE, got `%s`' % pair)
        key, value = pair.split('=', 1)
        options[key.strip()] = value
    return options


# Building blocks shared by the commands

def load_split(config, split):
    images = config['%s_images' % split]
    if not images:
        raise ConfigOptionError('Option `%s_images` is required' % split)
    if config['format'] == 'idx':
        dataset = load_idx(images, config['%s_labels' % split] or None)
    elif config['format'] in CIFAR_LAYOUTS:
        dataset = load_cifar_binary([p.strip() for p in images.split(',') if p.strip()],
                                    layout=config['format'], label_kind=config['label_kind'])
    else:
        raise ConfigOptionError('Unknown dataset format `%s`' % config['format'])
    if split == 'train' and config['subset']:
        dataset = random_subset(dataset, config['subset'], config['subset_seed'])
    return dataset


def train_config(config):
    return TrainConfig(
        epochs=config['epochs'],
        batch_size=config['batch_size'],
        learning_rate=config['learning_rate'],
        momentum=config['momentum'],
        weight_decay=config['weight_decay'],
        seed=config['seed'],
        lr_step=config['lr_step'],
        lr_gamma=config['lr_gamma'],
        basic_augment=config['basic_augment'],
        pad=config['pad'],
        )


def attack_config(config):
    return AttackConfig(
        epsilon=config['epsilon'],
        alpha_min=config['alpha_min'],
        alpha_max=config['alpha_max'],
        eta=config['eta'],
        C=config['C'],
        gamma=config['gamma'],
        mu=config['mu'],
        beta=config['beta'] or None,
        iters=config['iters'],
        init_iters=config['init_iters'],
        encoder_lr=config['encoder_lr'],
        seed=config['seed'],
        )


def augment_params(config):
    l_min, l_max, p_min, p_max, o_max = settings.AUGMENT_PRESETS.get(config['preset'], (None,) * 5)
    if l_min is None and not (config['l_range'] and config['p_range'] and config['o_max']):
        raise ConfigOptionError('Unknown augmentation preset `%s`' % config['preset'])
    if config['l_range']:
        l_min, l_max = get_range_from_string(config['l_range'], int)
    if config['p_range']:
        p_min, p_max = get_range_from_string(config['p_range'], float)
    if config['o_max']:
        o_max = coerce_value('o_max', config['o_max'], 0.0)
    return AugmentParams(l_min, l_max, p_min, p_max, o_max)


def baseline_params(config):
    d_min, d_max = get_range_from_string(config['grid_d_range'], int)
    return BaselineParams(cutout_length=config['cutout_length'], grid_d_min=d_min,
                          grid_d_max=d_max, grid_ratio=config['grid_ratio'],
                          has_patch=config['has_patch'], has_prob=config['has_prob'])


def prepare_out(config):
    if not os.path.isdir(config['out']):
        os.makedirs(config['out'])


# Commands

def cmd_train_target(config):
    """Trains the classifier that the attack targets."""
    train = load_split(config, 'train')
    test = load_split(config, 'test')
    train = normalize(train)
    test = normalize(test, train.mean, train.std)
    spec = reference_spec(train.image_shape, max(train.num_classes, test.num_classes),
                          conv_channels=get_index_list_from_string(config['conv_channels']),
                          dense_units=config['dense_units'], mean=train.mean, std=train.std)
    model = train_classifier(train, spec, train_config(config), test_set=test)
    prepare_out(config)
    save_model(model, config.path('model_path'))
    write_json({
        'command': 'train-target',
        'model': config['model_label'],
        'seed': config['seed'],
        'checksum': model.checksum(),
        'history': model.history,
        'test_accuracy': evaluate(model, test),
        }, config.path('report_path'))
    return EXIT_OK


def cmd_gen_masks(config):
    """Attacks every selected image and caches its points of interest."""
    model = load_model(config.path('model_path'))
    checksum = model.checksum()
    if config['model_checksum'] and config['model_checksum'] != checksum:
        raise StaleCacheError('Model checksum {} differs from the expected {}'.format(
            checksum, config['model_checksum']))
    dataset = load_split(config, config['split'])
    normalized = normalize(dataset, model.mean, model.std)
    if normalized.image_shape != model.spec.input_shape:
        raise StaleCacheError('Dataset images {} do not fit the model input {}'.format(
            normalized.image_shape, model.spec.input_shape))
    indices = np.arange(len(normalized))
    if config['only_correct']:
        indices = indices[predict_batch(model, normalized.images) == normalized.labels]
    if config['limit']:
        indices = indices[:config['limit']]
    cfg = attack_config(config)
    results = attack_dataset(normalized, indices, model, cfg, threads=config['threads'])
    summary = attack_metrics(results) if results else None

    cache = MaskCache(dict((r.index, r.pois) for r in results),
                      model_checksum=checksum,
                      config_fingerprint=cfg.fingerprint(),
                      dataset_fingerprint=dataset.fingerprint(),
                      image_count=len(dataset))
    prepare_out(config)
    save_mask_cache(cache, config.path('cache_path'))
    write_json({
        'command': 'gen-masks',
        'seed': config['seed'],
        'split': config['split'],
        'model_checksum': checksum,
        'config_fingerprint': cfg.fingerprint(),
        'summary': summary.to_dict() if summary else None,
        'degenerate': cfg.iters == 0,
        'images': [r.to_dict() for r in results],
        }, config.path('summary_path'))
    if summary:
        logger.info('ASR {:.4f} over {} images, mean l0 {}'.format(
            summary.asr, summary.total, summary.mean_l0))
    return EXIT_OK


def _load_cache_for(config, dataset):
    cache = load_mask_cache(config.path('cache_path'),
                            dataset_fingerprint=dataset.fingerprint())
    cache.validate(*dataset.image_shape[1:])
    return cache


def cmd_preview(config):
    """Writes the attack mask, one augmentation mask and the masked image."""
    dataset = load_split(config, config['split'])
    cache = _load_cache_for(config, dataset)
    params = augment_params(config)
    prepare_out(config)
    _, height, width = dataset.image_shape
    mean, _ = channel_stats(dataset)
    for index in get_index_list_from_string(config['indices']):
        if not 0 <= index < len(dataset):
            raise ContractError('Index {} outside the dataset of {} images'.format(
                index, len(dataset)))
        if index not in cache.pois:
            raise ContractError('No attack points cached for index {}'.format(index))
        pois = cache.pois[index]
        attack_grid = np.ones((height, width), dtype=bool)
        attack_grid[pois[:, 0], pois[:, 1]] = False
        save_pgm(attack_grid, os.path.join(config['out'], 'attack_%d.pgm' % index))
        if len(pois):
            mask = generate_mask(pois, params, width, height, rng_for(config['seed'], index))
        else:
            mask = AugMask(np.ones((height, width), dtype=bool), (), 0.0, 0.0)
        save_pgm(mask.grid, os.path.join(config['out'], 'augment_%d.pgm' % index))
        # removed cells at the channel mean, as the classifier sees them
        masked = fill_removed(dataset.raw_images[index], mask, mean)
        for channel, plane in enumerate(masked):
            save_pgm(to_gray_levels(plane),
                     os.path.join(config['out'], 'masked_%d_c%d.pgm' % (index, channel)))
    return EXIT_OK


def cmd_train(config):
    """Trains a classifier with one of the occlusion methods."""
    raw_train = load_split(config, 'train')
    test = load_split(config, 'test')
    train = normalize(raw_train)
    test = normalize(test, train.mean, train.std)
    cfg = train_config(config)
    method = config['method']
    augmenter = None
    params_label = ''
    if method != 'none':
        cache = None
        if method in ('advmask', 'attack-points') or (
                method in ('random', 'corner') and os.path.exists(config.path('cache_path'))):
            cache = _load_cache_for(config, raw_train)
        params = augment_params(config)
        baseline = baseline_params(config)
        schedule = Schedule(max(cfg.epochs, 1), config['upper_bound'], config['ramp'])
        augmenter = AugmentHook(method, params, schedule, cache=cache,
                                raw_images=raw_train.images, point_count=config['point_count'],
                                seed=config['seed'], baseline=baseline)
        params_label = 'l=%d-%d p=%g-%g o=%g' % (params.l_min, params.l_max, params.p_min,
                                                params.p_max, params.o_max)
        if method == 'cutout':
            params_label = 'length=%d' % baseline.cutout_length
        elif method == 'gridmask':
            params_label = 'd=%d-%d ratio=%g' % (baseline.grid_d_min, baseline.grid_d_max,
                                                 baseline.grid_ratio)
        elif method == 'has':
            params_label = 'patch=%d p=%g' % (baseline.has_patch, baseline.has_prob)
    spec = reference_spec(train.image_shape, max(train.num_classes, test.num_classes),
                          conv_channels=get_index_list_from_string(config['conv_channels']),
                          dense_units=config['dense_units'], mean=train.mean, std=train.std)
    model = train_classifier(train, spec, cfg, augmenter=augmenter, test_set=test)
    prepare_out(config)
    run_name = config['run_name'] or '%s_seed%d' % (method, config['seed'])
    save_model(model, os.path.join(config['out'], run_name + '.amdl'))
    accuracy = evaluate(model, test)
    write_json({
        'command': 'train',
        'method': method,
        'model': config['model_label'],
        'params': params_label,
        'seed': config['seed'],
        'checksum': model.checksum(),
        'history': model.history,
        'realized_fractions': augmenter.realized if augmenter else [],
        'under_ratio_masks': augmenter.under_ratio if augmenter else 0,
        'test_accuracy': accuracy,
        }, os.path.join(config['out'], run_name + '.json'))
    logger.info('{} seed {}: test accuracy {:.4f}'.format(method, config['seed'], accuracy))
    return EXIT_OK


def cmd_evaluate(config):
    """Prints the top-1 accuracy of a model on a split."""
    model = load_model(config.path('model_path'))
    dataset = normalize(load_split(config, config['split']), model.mean, model.std)
    accuracy = evaluate(model, dataset)
    print('%.6f' % accuracy)
    prepare_out(config)
    write_json({
        'command': 'evaluate',
        'split': config['split'],
        'model_checksum': model.checksum(),
        'images': len(dataset),
        'test_accuracy': accuracy,
        }, config.path('report_path'))
    return EXIT_OK


def cmd_report(config):
    """Merges run reports into one CSV/JSON table."""
    paths = []
    for pattern in [p.strip() for p in config['runs'].split(',') if p.strip()]:
        paths.extend(sorted(glob.glob(pattern)) or [pattern])
    runs = [read_run(path) for path in paths]
    rows = merge_runs(runs)
    prepare_out(config)
    write_csv(rows, config.path('csv_path'))
    write_json({'command': 'report', 'rows': rows}, config.path('report_path'))
    return EXIT_OK


COMMANDS = {
    'train-target': (cmd_train_target, _schema(
        COMMON_OPTIONS, DATA_OPTIONS, TRAIN_OPTIONS,
        {'model_path': 'target.amdl', 'report_path': 'train_target.json'})),
    'gen-masks': (cmd_gen_masks, _schema(
        COMMON_OPTIONS, DATA_OPTIONS, ATTACK_OPTIONS,
        {'model_path': '', 'model_checksum': '', 'split': 'train', 'limit': 0,
         'only_correct': False, 'cache_path': 'masks.amsk',
         'summary_path': 'attack_summary.json'})),
    'preview': (cmd_preview, _schema(
        COMMON_OPTIONS, DATA_OPTIONS, MASK_OPTIONS,
        {'split': 'train', 'cache_path': 'masks.amsk', 'indices': '0'})),
    'train': (cmd_train, _schema(
        COMMON_OPTIONS, DATA_OPTIONS, TRAIN_OPTIONS, MASK_OPTIONS, BASELINE_OPTIONS,
        {'method': 'advmask', 'cache_path': 'masks.amsk',
         'upper_bound': settings.SCHEDULE_UPPER_BOUND, 'ramp': settings.SCHEDULE_RAMP,
         'point_count': settings.BASELINE_POINT_COUNT, 'run_name': ''})),
    'evaluate': (cmd_evaluate, _schema(
        COMMON_OPTIONS, DATA_OPTIONS,
        {'model_path': '', 'split': 'test', 'report_path': 'evaluate.json'})),
    'report': (cmd_report, _schema(
        COMMON_OPTIONS,
        {'runs': '', 'csv_path': 'report.csv', 'report_path': 'report.json'})),
    }


def build_config(command, options):
    """Merges defaults, the config file and the command-line overrides."""
    config = RunConfig(command, COMMANDS[command][1])
    if options.config:
        config.update(read_config_file(options.config), 'file')
    config.update(parse_overrides(options.overrides), 'command line')
    flags = {}
    for key in ('seed', 'threads', 'out'):
        if getattr(options, key) is not None:
            flags[key] = getattr(options, key)
    config.update(flags, 'command line')
    return config


def build_parser():
    parser = argparse.ArgumentParser(
        prog='advmask', description="Adversarial-mask data augmentation pipeline.")
    parser.add_argument('command', nargs='?', choices=sorted(COMMANDS), metavar='COMMAND',
                        help="one of: " + ', '.join(sorted(COMMANDS)))
    parser.add_argument('--version', action='version', version=get_version())
    parser.add_argument('-c', '--config', help="key = value configuration file")
    parser.add_argument('--seed', type=int, help="random seed")
    parser.add_argument('--threads', type=int,
                        help="worker threads (default: one per logical core)")
    parser.add_argument('--out', help="output directory")
    parser.add_argument('--set', dest='overrides', action='append', metavar='KEY=VALUE',
                        help="override one configuration key (repeatable)")
    parser.add_argument('-v', '--verbose', action='store_true',
                        help="log debugging output")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        options = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits on --help, --version and usage errors
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if options.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')

    if options.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    command = options.command

    try:
        config = build_config(command, options)
        config.log()
        return COMMANDS[command][0](config)
    except StaleCacheError as e:
        logger.error('{}: {}'.format(command, e))
        return EXIT_STALE
    except (AdvMaskWorksError, IOError) as e:
        logger.error('{}: {}'.format(command, e))
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
