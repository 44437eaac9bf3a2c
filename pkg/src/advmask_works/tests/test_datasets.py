# -*- coding: utf-8 -*-

import gzip
import json
import os
import shutil
import tempfile
import unittest

import numpy as np
from PIL import Image

from advmask_works.cache import MaskCache
from advmask_works.cache import decode_cache
from advmask_works.cache import encode_cache
from advmask_works.cache import load_mask_cache
from advmask_works.cache import meta_path
from advmask_works.cache import save_mask_cache
from advmask_works.datasets import Schedule
from advmask_works.datasets import augmented_count
from advmask_works.datasets import load_cifar_binary
from advmask_works.datasets import load_idx
from advmask_works.datasets import normalize
from advmask_works.datasets import random_subset
from advmask_works.datasets import schedule_fraction
from advmask_works.exceptions import ConfigOptionError
from advmask_works.exceptions import ContractError
from advmask_works.exceptions import FormatError
from advmask_works.exceptions import StaleCacheError
from advmask_works.images import Transform
from advmask_works.images import basic_augment
from advmask_works.images import hflip
from advmask_works.images import pad_crop
from advmask_works.images import save_pgm
from advmask_works.images import to_gray_levels
from advmask_works.images import transform_points
from advmask_works.reports import merge_runs
from advmask_works.reports import read_run
from advmask_works.reports import write_csv
from advmask_works.reports import write_json
from advmask_works.tests import synthetic_images
from advmask_works.tests import synthetic_set
from advmask_works.tests import write_idx
from advmask_works.utils import fnv1a_64
from advmask_works.utils import get_index_list_from_string
from advmask_works.utils import get_range_from_string


class TempDirMixin:

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)


class IdxTestCase(TempDirMixin, unittest.TestCase):

    def test_load(self):
        images, labels = synthetic_images(6, side=5)
        images_path, labels_path = write_idx(self.tmp, 'train', images, labels)
        dataset = load_idx(images_path)
        self.assertEqual(len(dataset), 6)
        self.assertEqual(dataset.image_shape, (1, 5, 5))
        np.testing.assert_array_equal(dataset.labels, labels)
        self.assertLessEqual(dataset.images.max(), 1.0)
        np.testing.assert_allclose(dataset.images, images, atol=0.5 / 255 + 1e-6)

    def test_gzipped(self):
        images, labels = synthetic_images(4, side=5)
        images_path, labels_path = write_idx(self.tmp, 'train', images, labels)
        for path in (images_path, labels_path):
            with open(path, 'rb') as src, gzip.open(path + '.gz', 'wb') as dst:
                dst.write(src.read())
        dataset = load_idx(images_path + '.gz', labels_path + '.gz')
        self.assertEqual(len(dataset), 4)

    def test_truncated(self):
        images, labels = synthetic_images(4, side=5)
        images_path, labels_path = write_idx(self.tmp, 'train', images, labels)
        with open(images_path, 'rb') as f:
            buf = f.read()
        with open(images_path, 'wb') as f:
            f.write(buf[:-1])
        with self.assertRaises(FormatError):
            load_idx(images_path, labels_path)

    def test_bad_magic(self):
        images, labels = synthetic_images(4, side=5)
        images_path, labels_path = write_idx(self.tmp, 'train', images, labels)
        # label file offered as images
        with self.assertRaises(FormatError):
            load_idx(labels_path, labels_path)

    def test_count_mismatch(self):
        images, labels = synthetic_images(4, side=5)
        images_path, _ = write_idx(self.tmp, 'a', images, labels)
        _, labels_path = write_idx(self.tmp, 'b', images[:3], labels[:3])
        with self.assertRaises(FormatError):
            load_idx(images_path, labels_path)


class CifarTestCase(TempDirMixin, unittest.TestCase):

    def write(self, name, labels, extra=None):
        rng = np.random.default_rng(0)
        rows = []
        for i, label in enumerate(labels):
            head = [label] if extra is None else [extra[i], label]
            rows.append(np.concatenate([np.array(head, dtype=np.uint8),
                                        rng.integers(0, 256, 3072).astype(np.uint8)]))
        path = os.path.join(self.tmp, name)
        with open(path, 'wb') as f:
            f.write(np.concatenate(rows).tobytes())
        return path

    def test_cifar10(self):
        path = self.write('data_batch_1.bin', [3, 7, 1])
        dataset = load_cifar_binary(path)
        self.assertEqual(dataset.images.shape, (3, 3, 32, 32))
        np.testing.assert_array_equal(dataset.labels, [3, 7, 1])

    def test_multiple_batches(self):
        paths = [self.write('a.bin', [0, 1]), self.write('b.bin', [2])]
        self.assertEqual(len(load_cifar_binary(paths)), 3)

    def test_cifar100_labels(self):
        path = self.write('train.bin', [55, 12], extra=[4, 9])
        np.testing.assert_array_equal(load_cifar_binary(path, 'cifar100', 'fine').labels,
                                      [55, 12])
        np.testing.assert_array_equal(load_cifar_binary(path, 'cifar100', 'coarse').labels,
                                      [4, 9])

    def test_partial_record(self):
        path = self.write('data_batch_1.bin', [3])
        with open(path, 'ab') as f:
            f.write(b'\0' * 10)
        with self.assertRaises(FormatError):
            load_cifar_binary(path)

    def test_label_kind(self):
        with self.assertRaises(ContractError):
            load_cifar_binary(self.write('x.bin', [0]), 'cifar10', 'medium')
        with self.assertRaises(ContractError):
            load_cifar_binary(self.write('y.bin', [0]), 'cifar10', 'coarse')
        with self.assertRaises(ContractError):
            load_cifar_binary(self.write('z.bin', [0]), 'cifar1000')

    def test_cifar100_record_count_divisible_by_cifar10_record(self):
        # 3073 records of 3074 bytes also split into whole 3073-byte records
        rows = np.zeros((3073, 3074), dtype=np.uint8)
        rows[:, 0] = np.arange(3073) % 20
        rows[:, 1] = np.arange(3073) % 100
        path = os.path.join(self.tmp, 'train.bin')
        with open(path, 'wb') as f:
            f.write(rows.tobytes())
        dataset = load_cifar_binary(path, 'cifar100')
        self.assertEqual(len(dataset), 3073)
        np.testing.assert_array_equal(dataset.labels, np.arange(3073) % 100)
        np.testing.assert_array_equal(load_cifar_binary(path, 'cifar100', 'coarse').labels,
                                      np.arange(3073) % 20)


class NormalizeTestCase(unittest.TestCase):

    def test_zero_mean_unit_std(self):
        dataset = normalize(synthetic_set(20))
        np.testing.assert_allclose(dataset.images.mean(axis=(0, 2, 3)), [0.0], atol=1e-5)
        np.testing.assert_allclose(dataset.images.std(axis=(0, 2, 3)), [1.0], atol=1e-4)
        self.assertTrue(dataset.normalized)

    def test_test_split_uses_train_statistics(self):
        train = normalize(synthetic_set(20, seed=0))
        test = normalize(synthetic_set(10, seed=1), train.mean, train.std)
        np.testing.assert_array_equal(test.mean, train.mean)

    def test_twice(self):
        with self.assertRaises(ContractError):
            normalize(normalize(synthetic_set(4)))

    def test_raw_images_are_kept(self):
        raw = synthetic_set(4)
        np.testing.assert_array_equal(normalize(raw).raw_images, raw.images)

    def test_random_subset(self):
        dataset = synthetic_set(20)
        a = random_subset(dataset, 5, seed=1)
        b = random_subset(dataset, 5, seed=1)
        self.assertEqual(len(a), 5)
        self.assertEqual(a.fingerprint(), b.fingerprint())
        self.assertIs(random_subset(dataset, 50, seed=1), dataset)

    def test_fingerprint_tracks_labels(self):
        dataset = synthetic_set(6)
        other = synthetic_set(6)
        other.labels[0] = 1 - other.labels[0]
        self.assertNotEqual(dataset.fingerprint(), other.fingerprint())


class ImagesTestCase(TempDirMixin, unittest.TestCase):

    def setUp(self):
        super(ImagesTestCase, self).setUp()
        self.image = np.random.default_rng(0).uniform(size=(3, 6, 5)).astype(np.float32)

    def test_flip_twice(self):
        np.testing.assert_array_equal(hflip(hflip(self.image)), self.image)

    def test_center_crop(self):
        np.testing.assert_array_equal(pad_crop(self.image, 4, 4, 4), self.image)

    def test_crop_shifts_content(self):
        out = pad_crop(self.image, 0, 4, 4)
        self.assertEqual(out.shape, self.image.shape)
        self.assertTrue((out[:, :4] == 0).all())
        np.testing.assert_array_equal(out[:, 4:], self.image[:, :2])

    def test_basic_augment_none(self):
        out, transform = basic_augment(self.image, np.random.default_rng(0), mode='none')
        self.assertIs(out, self.image)
        self.assertEqual(transform, Transform(0, 0, 0, False))

    def test_points_follow_the_image(self):
        rng = np.random.default_rng(1)
        marked = np.zeros((1, 8, 8), dtype=np.float32)
        marked[0, 3, 5] = 1.0
        for _ in range(20):
            out, transform = basic_augment(marked, rng, mode='crop-flip', pad=2)
            points = transform_points([[3, 5]], transform, 8, 8)
            if len(points):
                self.assertEqual(out[0, points[0, 0], points[0, 1]], 1.0)
            else:
                self.assertEqual(out.sum(), 0.0)

    def test_gray_levels(self):
        np.testing.assert_array_equal(to_gray_levels([[0.0, 0.5, 1.0, 2.0]]), [[0, 128, 255, 255]])

    def test_save_pgm(self):
        path = os.path.join(self.tmp, 'mask.pgm')
        grid = np.array([[True, False], [False, True]])
        save_pgm(grid, path)
        with open(path, 'rb') as f:
            self.assertEqual(f.read(2), b'P5')
        np.testing.assert_array_equal(np.asarray(Image.open(path)), [[255, 0], [0, 255]])


class ScheduleTestCase(unittest.TestCase):

    def test_fractions(self):
        schedule = Schedule(40)
        self.assertEqual(schedule_fraction(0, schedule), 0.0)
        self.assertAlmostEqual(schedule_fraction(10, schedule), 0.4)
        self.assertAlmostEqual(schedule_fraction(20, schedule), 0.8)
        self.assertAlmostEqual(schedule_fraction(39, schedule), 0.8)

    def test_monotone(self):
        schedule = Schedule(25)
        values = [schedule_fraction(e, schedule) for e in range(25)]
        self.assertEqual(values, sorted(values))
        self.assertLessEqual(max(values), 0.8)

    def test_out_of_range(self):
        with self.assertRaises(ContractError):
            schedule_fraction(40, Schedule(40))
        with self.assertRaises(ContractError):
            Schedule(0)

    def test_realized_fraction(self):
        for n in (7, 50, 1000):
            for fraction in (0.0, 0.13, 0.4, 0.8):
                count = augmented_count(fraction, n)
                self.assertLessEqual(abs(count / float(n) - fraction), 1.0 / n)
        self.assertEqual(augmented_count(0.4, 10), 4)


class MaskCacheTestCase(TempDirMixin, unittest.TestCase):

    def setUp(self):
        super(MaskCacheTestCase, self).setUp()
        self.path = os.path.join(self.tmp, 'masks.amsk')
        self.cache = MaskCache({0: [[1, 2], [3, 4]], 5: [], 2: [[31, 31]]},
                               model_checksum='abc', config_fingerprint='cfg',
                               dataset_fingerprint='data', image_count=6)

    def test_round_trip(self):
        save_mask_cache(self.cache, self.path)
        self.assertEqual(load_mask_cache(self.path), self.cache)

    def test_layout(self):
        blob = encode_cache(self.cache)
        self.assertEqual(blob[:4], b'AMSK')
        # header, three records, three points and the checksum
        self.assertEqual(len(blob), 12 + 3 * 8 + 3 * 4 + 8)
        self.assertEqual(sorted(decode_cache(blob)), [0, 2, 5])

    def test_edited_byte(self):
        save_mask_cache(self.cache, self.path)
        with open(self.path, 'rb') as f:
            buf = bytearray(f.read())
        buf[20] ^= 0xff
        with open(self.path, 'wb') as f:
            f.write(bytes(buf))
        with self.assertRaises(FormatError):
            load_mask_cache(self.path)

    def test_stale_fingerprints(self):
        save_mask_cache(self.cache, self.path)
        load_mask_cache(self.path, model_checksum='abc', config_fingerprint='cfg')
        with self.assertRaises(StaleCacheError):
            load_mask_cache(self.path, config_fingerprint='other')
        with self.assertRaises(StaleCacheError):
            load_mask_cache(self.path, model_checksum='other')
        with self.assertRaises(StaleCacheError):
            load_mask_cache(self.path, dataset_fingerprint='other')

    def test_binary_swapped_under_sidecar(self):
        other_path = os.path.join(self.tmp, 'other.amsk')
        other = MaskCache({0: [[5, 5], [6, 6]]}, model_checksum='xyz', image_count=6)
        save_mask_cache(self.cache, self.path)
        save_mask_cache(other, other_path)
        shutil.copyfile(other_path, self.path)
        with self.assertRaises(StaleCacheError):
            load_mask_cache(self.path, model_checksum='abc')
        with self.assertRaises(StaleCacheError):
            load_mask_cache(self.path)

    def test_sidecar(self):
        save_mask_cache(self.cache, self.path)
        with open(meta_path(self.path)) as f:
            meta = json.load(f)
        self.assertEqual(meta['model_checksum'], 'abc')
        self.assertEqual(meta['image_count'], 6)
        os.remove(meta_path(self.path))
        with self.assertRaises(FormatError):
            load_mask_cache(self.path)

    def test_validate(self):
        self.cache.validate(32, 32)
        with self.assertRaises(FormatError):
            self.cache.validate(16, 16)
        with self.assertRaises(FormatError):
            MaskCache({9: [[0, 0]]}, image_count=6).validate(32, 32)

    def test_same_input_same_bytes(self):
        other = MaskCache({2: [[31, 31]], 0: [[1, 2], [3, 4]], 5: []})
        self.assertEqual(encode_cache(self.cache), encode_cache(other))


class UtilsTestCase(unittest.TestCase):

    def test_fnv1a(self):
        self.assertEqual(fnv1a_64(b''), 0xcbf29ce484222325)
        self.assertEqual(fnv1a_64(b'a'), 0xaf63dc4c8601ec8c)

    def test_ranges(self):
        self.assertEqual(get_range_from_string('2-15'), (2, 15))
        self.assertEqual(get_range_from_string('7'), (7, 7))
        self.assertEqual(get_range_from_string('0.06-0.5', float), (0.06, 0.5))
        for value in ('5-2', 'a-b', None, 42, ('x', 'y')):
            with self.assertRaises(ConfigOptionError):
                get_range_from_string(value)

    def test_index_list(self):
        self.assertEqual(get_index_list_from_string('0, 3,7'), [0, 3, 7])
        with self.assertRaises(ConfigOptionError):
            get_index_list_from_string('1,x')


class ReportsTestCase(TempDirMixin, unittest.TestCase):

    def run_file(self, name, **fields):
        document = {'method': 'advmask', 'model': 'compact-cnn', 'params': '', 'seed': 0,
                    'test_accuracy': 0.9}
        document.update(fields)
        return write_json(document, os.path.join(self.tmp, name))

    def test_merge(self):
        paths = [self.run_file('a.json', seed=0, test_accuracy=0.9),
                 self.run_file('b.json', seed=1, test_accuracy=0.8),
                 self.run_file('c.json', method='none', test_accuracy=0.7)]
        rows = merge_runs([read_run(p) for p in paths])
        self.assertEqual([r['method'] for r in rows], ['advmask', 'none'])
        self.assertEqual(rows[0]['runs'], 2)
        self.assertAlmostEqual(rows[0]['mean_accuracy'], 0.85)
        self.assertAlmostEqual(rows[0]['spread'], 0.070711, places=5)
        self.assertEqual(rows[1]['spread'], 0.0)
        path = write_csv(rows, os.path.join(self.tmp, 'report.csv'))
        with open(path) as f:
            self.assertEqual(len(f.read().splitlines()), 3)

    def test_schema_is_checked(self):
        path = os.path.join(self.tmp, 'old.json')
        with open(path, 'w') as f:
            json.dump({'method': 'none', 'model': 'm', 'seed': 0, 'test_accuracy': 1.0}, f)
        with self.assertRaises(FormatError):
            read_run(path)

    def test_empty(self):
        with self.assertRaises(ContractError):
            merge_runs([])
