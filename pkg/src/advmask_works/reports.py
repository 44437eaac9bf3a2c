# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""JSON run reports and the CSV table merging them.

Every JSON document written by the commands carries ``"schema": 1``.
``merge_runs()`` groups training runs by (method, model, params) and
reports the mean and spread of the final test accuracy over seeds, one
row per group, which is the shape of the accuracy tables in the
literature (method x model -> accuracy).

"""

import csv
import json
import logging

import numpy as np

from advmask_works.exceptions import ContractError
from advmask_works.exceptions import FormatError


logger = logging.getLogger(__name__)

SCHEMA = 1

CSV_FIELDS = ('method', 'model', 'params', 'runs', 'seeds', 'mean_accuracy',
              'spread', 'min_accuracy', 'max_accuracy')


def write_json(document, path):
    document = dict(document)
    document['schema'] = SCHEMA
    with open(path, 'w') as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('Wrote {}'.format(path))
    return path


def read_run(path):
    try:
        with open(path) as f:
            document = json.load(f)
    except ValueError as e:
        raise FormatError('{} is not a JSON report: {}'.format(path, e))
    if document.get('schema') != SCHEMA:
        raise FormatError('{} has unsupported schema {}'.format(path, document.get('schema')))
    for key in ('method', 'model', 'seed', 'test_accuracy'):
        if key not in document:
            raise FormatError('{} lacks the `{}` field'.format(path, key))
    return document


def merge_runs(runs):
    """One row per (method, model, params) with accuracy statistics."""
    if not runs:
        raise ContractError('No runs to report')
    groups = {}
    for run in runs:
        key = (run['method'], run['model'], run.get('params', ''))
        groups.setdefault(key, []).append(run)
    rows = []
    for (method, model, params), members in sorted(groups.items()):
        accuracy = np.array([m['test_accuracy'] for m in members], dtype=np.float64)
        rows.append({
            'method': method,
            'model': model,
            'params': params,
            'runs': len(members),
            'seeds': ' '.join(str(m['seed']) for m in sorted(members, key=lambda m: m['seed'])),
            'mean_accuracy': round(float(accuracy.mean()), 6),
            'spread': round(float(accuracy.std(ddof=1)) if len(accuracy) > 1 else 0.0, 6),
            'min_accuracy': round(float(accuracy.min()), 6),
            'max_accuracy': round(float(accuracy.max()), 6),
            })
    return rows


def write_csv(rows, path):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info('Wrote {} rows to {}'.format(len(rows), path))
    return path
