import json
import os
import sys
import tempfile
import unittest

import numpy as np

from stopladder import utils
from stopladder.utils import smart_open


class TestSmartOpen(unittest.TestCase):
    def test_without_filename(self):
        with smart_open() as fh:
            self.assertIs(fh, sys.stdout)

    def test_with_empty_filename(self):
        """Should raise a `FileNotFoundError`"""
        with self.assertRaises(FileNotFoundError):  # noqa
            with smart_open(''):
                pass

    def test_with_real_filename(self):
        test_data = 'This is the test data'

        with tempfile.TemporaryDirectory() as tmp_dirname:
            # Make a temporary file to use
            filename = os.path.join(tmp_dirname, 'foo')

            with smart_open(filename) as fh:
                fh.write(test_data)

            self.assertEqual(test_data, open(filename).read())


class TestFormatting(unittest.TestCase):
    def test_format_cell(self):
        self.assertEqual(utils.format_cell(None), '')
        self.assertEqual(utils.format_cell(True), 'True')
        self.assertEqual(utils.format_cell(np.bool_(False)), 'False')
        self.assertEqual(utils.format_cell(3), '3')
        self.assertEqual(utils.format_cell(np.int64(7)), '7')
        self.assertEqual(utils.format_cell(0.1), '0.1')
        self.assertEqual(utils.format_cell(np.float64(1.0) / 3.0), repr(1.0 / 3.0))
        self.assertEqual(utils.format_cell('pass'), 'pass')

    def test_json_for_numpy(self):
        content = utils.json_for({'b': np.arange(2), 'a': np.float64(0.5)})
        self.assertEqual(json.loads(content), {'a': 0.5, 'b': [0, 1]})

    def test_write_csv(self):
        rows = [{'x': 1, 'y': 0.25}, {'x': 2}]

        with tempfile.TemporaryDirectory() as tmp_dirname:
            filename = os.path.join(tmp_dirname, 'nested', 'rows.csv')
            utils.write_csv(rows, ['x', 'y'], filename)

            with open(filename) as fh:
                content = fh.read()

        self.assertEqual(content, 'x,y\n1,0.25\n2,\n')


class TestSeeds(unittest.TestCase):
    def test_task_seed_is_stable(self):
        self.assertEqual(utils.task_seed(7, 'fields'), utils.task_seed(7, 'fields'))

    def test_task_seed_separates_tasks(self):
        self.assertNotEqual(utils.task_seed(7, 'fields'), utils.task_seed(7, 'rules'))
        self.assertNotEqual(utils.task_seed(7, 'fields'), utils.task_seed(8, 'fields'))

    def test_stable_hash_ignores_key_order(self):
        self.assertEqual(utils.stable_hash({'a': 1, 'b': [1, 2]}),
                         utils.stable_hash({'b': [1, 2], 'a': 1}))


if __name__ == '__main__':
    unittest.main()
