import json
import os
import tempfile
import unittest
from unittest import mock

from stopladder import stopladder as _stopladder
from stopladder.config import load_config, parse_config
from stopladder.errors import IntegrityError, ValidationError

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')

ACCEPTANCE = os.environ.get('STOPLADDER_ACCEPTANCE') == '1'


def config_path(name):
    return os.path.join(CONFIG_DIR, name)


def read(path, mode='r'):
    with open(path, mode) as fh:
        return fh.read()


class TestChecks(unittest.TestCase):
    def test_every_check_has_a_task(self):
        for check_id in _stopladder.CHECK_IDS:
            self.assertIn(_stopladder.CHECK_TASK[check_id], _stopladder.TASKS)
        self.assertEqual(len(set(_stopladder.CHECK_IDS)), len(_stopladder.CHECK_IDS))
        self.assertEqual(set(_stopladder.TASK_FUNCTIONS), set(_stopladder.TASKS))

    def test_row_for(self):
        row = _stopladder.row_for('schedule', False, 0.5, 0.1, 0.0)
        self.assertEqual(row['status'], 'fail')
        self.assertEqual(list(row), _stopladder.HEADERS)

    def test_passed(self):
        self.assertTrue(_stopladder.passed([]))
        self.assertFalse(_stopladder.passed([{'status': 'pass'}, {'status': 'error'}]))

    def test_unknown_check_override(self):
        config = load_config(config_path('trivial_suite.yml'))
        with self.assertRaises(ValidationError) as context:
            _stopladder.apply_overrides(config, checks=['no_such_check'])
        self.assertEqual(context.exception.key, '--check')

    def test_check_override(self):
        config = load_config(config_path('trivial_suite.yml'))
        overridden = _stopladder.apply_overrides(config, seed=11, checks=['schedule'])
        self.assertEqual(overridden.enabled_checks(_stopladder.CHECK_IDS), ['schedule'])
        self.assertEqual(overridden.seed, 11)
        self.assertEqual(config.seed, 7)


class TestRun(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = load_config(config_path('trivial_suite.yml'))
        cls.out = os.path.join(cls.tmp.name, 'first')
        cls.manifest, cls.rows = _stopladder.run(cls.config, output_dir=cls.out)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_all_pass(self):
        self.assertTrue(_stopladder.passed(self.rows), self.rows)
        self.assertEqual([row['check'] for row in self.rows],
                         self.config.enabled_checks(_stopladder.CHECK_IDS))

    def test_manifest(self):
        manifest = _stopladder.load_manifest(os.path.join(self.out, _stopladder.MANIFEST_FILE))
        self.assertEqual(manifest['config_hash'], self.config.hash())
        self.assertEqual(manifest['seed'], 7)
        self.assertEqual(sorted(manifest['tasks']), ['core', 'trivial'])
        self.assertEqual(manifest['tasks']['trivial']['artifacts'], ['trivial.csv'])
        for name in _stopladder.manifest_files(manifest):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)

    def test_report(self):
        rows = _stopladder.report(os.path.join(self.out, _stopladder.MANIFEST_FILE))
        self.assertEqual([row['check'] for row in rows], [row['check'] for row in self.rows])
        self.assertTrue(all(row['status'] == 'pass' for row in rows))

    def test_rerun_is_identical(self):
        again = os.path.join(self.tmp.name, 'second')
        manifest, _ = _stopladder.run(self.config, output_dir=again)
        for name in _stopladder.manifest_files(manifest):
            self.assertEqual(read(os.path.join(self.out, name), 'rb'),
                             read(os.path.join(again, name), 'rb'), name)

    def test_missing_artifact(self):
        copy_dir = os.path.join(self.tmp.name, 'partial')
        _stopladder.run(self.config, output_dir=copy_dir, checks=['schedule'])
        os.remove(os.path.join(copy_dir, 'schedule.csv'))
        with self.assertRaises(IntegrityError):
            _stopladder.report(os.path.join(copy_dir, _stopladder.MANIFEST_FILE))


class TestTaskErrors(unittest.TestCase):
    document = {
        'problem': {
            'horizon': 1.0,
            'operator': {'kind': 'dense', 'entries': [[-0.5]]},
            'covariance': {'lambdas': [1.0]},
            'diffusion': {'kind': 'constant', 'gamma': [0.3]},
            'gain': {'family': 'constant', 'level': 0.7},
            'schedule': {'rule': 'inverse', 'scale': 0.01},
        },
        'ladder': {'alphas': [1, 2]},
        'checks': {'schedule': True, 'yosida_convergence': True},
    }

    def test_failing_task_is_recorded(self):
        with tempfile.TemporaryDirectory() as tmp_dirname:
            manifest, rows = _stopladder.run(parse_config(self.document), output_dir=tmp_dirname)
            saved = json.loads(read(os.path.join(tmp_dirname, _stopladder.MANIFEST_FILE)))

        statuses = {row['check']: row['status'] for row in rows}
        self.assertEqual(statuses, {'schedule': 'pass', 'yosida_convergence': 'error'})
        self.assertEqual(manifest['tasks']['ladder']['status'], 'error')
        self.assertEqual(saved['tasks']['core']['status'], 'ok')
        self.assertFalse(_stopladder.passed(rows))

    def test_unexpected_exception_is_recorded(self):
        def broken(config, context, wanted):
            raise KeyError('alphas')

        with mock.patch.dict(_stopladder.TASK_FUNCTIONS, {'ladder': broken}):
            with tempfile.TemporaryDirectory() as tmp_dirname:
                manifest, rows = _stopladder.run(parse_config(self.document), output_dir=tmp_dirname)

        statuses = {row['check']: row['status'] for row in rows}
        self.assertEqual(statuses, {'schedule': 'pass', 'yosida_convergence': 'error'})
        self.assertEqual(manifest['tasks']['ladder']['status'], 'error')
        self.assertIn('alphas', manifest['tasks']['ladder']['error'])


def saturated_document(checks, **ladder):
    document = {
        'problem': {
            'horizon': 1.0,
            'operator': {'kind': 'diagonal', 'entries': [-0.5, -1.0]},
            'covariance': {'lambdas': [1.0, 0.0625]},
            'diffusion': {'kind': 'saturated', 'gamma': [0.3, 0.2], 'slope': [0.1, 0.05], 'scale': 1.0},
            'gain': {'family': 'put', 'ell': [1.0], 'strike': 0.5, 'cap': 1.0},
            'schedule': {'rule': 'inverse', 'scale': 0.05},
        },
        'ladder': {'n': 1, 'radius': 3.0, 'grid': {'nodes': 41, 'time_steps': 20}, 'x0': [0.5, 0.1]},
        'checks': {check_id: True for check_id in checks},
    }
    document['ladder'].update(ladder)
    return document


class TestSaturatedCore(unittest.TestCase):
    def test_green_identity_with_tanh_coefficients(self):
        config = parse_config(saturated_document(['green_identity', 'continuity_estimate', 'ellipticity']))
        with tempfile.TemporaryDirectory() as tmp_dirname:
            _, rows = _stopladder.run(config, output_dir=tmp_dirname)
        statuses = {row['check']: row['status'] for row in rows}
        self.assertEqual(statuses, {'ellipticity': 'pass', 'green_identity': 'pass',
                                    'continuity_estimate': 'pass'}, rows)


class TestSweep(unittest.TestCase):
    def test_norms_within_uniform_bound(self):
        document = saturated_document(['norm_audit'], norm_p=[2], sweep={'alphas': [4, 16], 'ns': [1, 2]})
        with tempfile.TemporaryDirectory() as tmp_dirname:
            results, rows = _stopladder.sweep(parse_config(document), output_dir=tmp_dirname)
            trend = read(os.path.join(tmp_dirname, 'norm_trend.csv')).splitlines()

        self.assertEqual(len(results), 4)
        self.assertTrue(all(row['within_bound'] for row in results))
        self.assertEqual([row['check'] for row in rows], ['norm_audit'])
        self.assertTrue(_stopladder.passed(rows), rows)
        self.assertAlmostEqual(rows[0]['bound'], 2.0)
        self.assertLessEqual(rows[0]['measured'], rows[0]['bound'])
        self.assertEqual(trend[0], ','.join(_stopladder.TREND_HEADERS))
        self.assertEqual(len(trend), 5)


class TestNormTrend(unittest.TestCase):
    def test_flat_series(self):
        flat, relative = _stopladder._no_trend([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
        self.assertTrue(flat)
        self.assertEqual(relative, 0.0)

    def test_growth_is_reported_not_failed(self):
        with self.assertLogs(level='WARNING'):
            rows = _stopladder._trend_rows('n', [1.0, 2.0, 4.0], 2.0, {'Du': [0.1, 0.2, 0.4]})
        self.assertEqual(len(rows), 1)
        self.assertFalse(rows[0]['flat'])
        self.assertGreater(rows[0]['relative_slope'], 0.05)


class TestReport(unittest.TestCase):
    def test_empty_manifest(self):
        with tempfile.TemporaryDirectory() as tmp_dirname:
            path = os.path.join(tmp_dirname, _stopladder.MANIFEST_FILE)
            with open(path, 'w') as fh:
                json.dump({}, fh)
            self.assertEqual(_stopladder.report(path), [])

    def test_header_only_checks(self):
        with tempfile.TemporaryDirectory() as tmp_dirname:
            path = os.path.join(tmp_dirname, _stopladder.MANIFEST_FILE)
            with open(path, 'w') as fh:
                json.dump({'files': [_stopladder.CHECKS_FILE], 'tasks': {}}, fh)
            with open(os.path.join(tmp_dirname, _stopladder.CHECKS_FILE), 'w') as fh:
                fh.write(','.join(_stopladder.HEADERS) + '\n')
            self.assertEqual(_stopladder.report(path), [])


@unittest.skipIf(not ACCEPTANCE, 'set STOPLADDER_ACCEPTANCE=1 for full-size runs')
class TestShippedSuites(unittest.TestCase):
    def run_config(self, name):
        config = load_config(config_path(name))
        with tempfile.TemporaryDirectory() as tmp_dirname:
            _, rows = _stopladder.run(config, output_dir=tmp_dirname, jobs=4)
        failing = [row for row in rows if row['status'] != 'pass']
        self.assertEqual(failing, [])

    def test_canonical_put(self):
        self.run_config('canonical_put_1d.yml')

    def test_symmetric_ou(self):
        self.run_config('ou_symmetric_2d.yml')

    def test_ladder_sweep(self):
        self.run_config('ladder_sweep.yml')

    def test_forward_curve(self):
        self.run_config('hjm_toy.yml')

    def test_trivial_suite(self):
        self.run_config('trivial_suite.yml')

    def test_sweep(self):
        config = load_config(config_path('ladder_sweep.yml'))
        with tempfile.TemporaryDirectory() as tmp_dirname:
            results, rows = _stopladder.sweep(config, output_dir=tmp_dirname, jobs=4)
            self.assertTrue(os.path.exists(os.path.join(tmp_dirname, 'sweep.csv')))
        self.assertTrue(results)
        self.assertTrue(_stopladder.passed(rows), rows)


if __name__ == '__main__':
    unittest.main()
