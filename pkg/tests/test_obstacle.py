import math
import os
import tempfile
import unittest

import numpy as np

from stopladder import obstacle, operators
from stopladder.errors import DimensionError, StabilityError, ValidationError
from stopladder.measures import GaussianMeasure
from stopladder.models import CovarianceSpec, DiffusionSpec, GainSpec, OperatorSpec, TimeFactor


def scalar_instance(gain, a=-0.05, gamma=0.3, epsilon=0.01):
    drift = operators.yosida(OperatorSpec('diagonal', [a]), math.inf, 1)
    coeffs = operators.generator_coeffs(
        drift, DiffusionSpec('constant', [gamma]), CovarianceSpec([1.0]), epsilon)
    return coeffs, operators.forcing(gain, coeffs)


def put_gain():
    return GainSpec('put', 1.0, ell=[1.0], strike=1.0, cap=1.0)


class TestDomainSpec(unittest.TestCase):
    def test_interior(self):
        dom = obstacle.DomainSpec(2.0, 5)
        np.testing.assert_allclose(dom.axes[0], [-2.0, -1.0, 0.0, 1.0, 2.0])
        np.testing.assert_array_equal(dom.interior, [1, 2, 3])

    def test_ball_in_two_dimensions(self):
        dom = obstacle.DomainSpec(1.0, [5, 5])
        self.assertFalse(dom.mask[0, 0])
        self.assertTrue(dom.mask[2, 2])
        self.assertEqual(dom.size, 25)

    def test_with_radius_keeps_spacing(self):
        dom = obstacle.DomainSpec(2.0, 41)
        wider = dom.with_radius(4.0)
        self.assertEqual(wider.counts, (81,))
        np.testing.assert_allclose(wider.spacing, dom.spacing)

    def test_dimension_limit(self):
        with self.assertRaises(DimensionError):
            obstacle.DomainSpec(1.0, 5, n=4)

    def test_too_few_nodes(self):
        with self.assertRaises(ValidationError):
            obstacle.DomainSpec(1.0, 2)


class TestAssembleGenerator(unittest.TestCase):
    def test_constants_are_annihilated(self):
        coeffs, _ = scalar_instance(put_gain())
        dom = obstacle.DomainSpec(3.0, 31)
        L = obstacle.assemble_generator(coeffs, dom)
        np.testing.assert_allclose(L @ np.ones(dom.size), 0.0, atol=1e-10)

    def test_quadratic(self):
        coeffs, _ = scalar_instance(put_gain(), a=-1.0, gamma=0.5, epsilon=0.1)
        dom = obstacle.DomainSpec(2.0, 41)
        L = obstacle.assemble_generator(coeffs, dom)
        x = dom.points[:, 0]
        interior = dom.points[dom.interior, 0]
        # L x^2 = B + 2 a x^2 with B = 0.26
        np.testing.assert_allclose(L @ x ** 2, 0.26 - 2.0 * interior ** 2, atol=1e-10)

    def test_dimension_mismatch(self):
        coeffs, _ = scalar_instance(put_gain())
        with self.assertRaises(DimensionError):
            obstacle.assemble_generator(coeffs, obstacle.DomainSpec(1.0, [5, 5]))


class TestTrivialSolves(unittest.TestCase):
    def setUp(self):
        self.dom = obstacle.DomainSpec(3.0, 61)

    def test_constant_gain(self):
        coeffs, f = scalar_instance(GainSpec('constant', 1.0, level=1.0))
        psor = obstacle.solve_psor(coeffs, f, self.dom, 20)
        penalized = obstacle.solve_penalized(coeffs, f, self.dom, obstacle.PenaltyParams(1e-4, 20))
        for field in (psor, penalized):
            np.testing.assert_allclose(field.u, 0.0, atol=1e-12)
            np.testing.assert_allclose(field.U, 1.0, atol=1e-12)

    def test_decaying_gain(self):
        gain = GainSpec('constant', 1.0, level=1.0, time_factor=TimeFactor('affine', h0=1.0, h1=-1.0))
        coeffs, f = scalar_instance(gain)
        psor = obstacle.solve_psor(coeffs, f, self.dom, 20)
        np.testing.assert_allclose(psor.u, 0.0, atol=1e-12)
        epsilon = 1e-4
        penalized = obstacle.solve_penalized(coeffs, f, self.dom, obstacle.PenaltyParams(epsilon, 20))
        self.assertLessEqual(float(np.max(np.abs(penalized.u))), 2.0 * epsilon)
        self.assertTrue(obstacle.value_bounds(penalized, 1.0)['passed'])

    def test_zero_forcing_residual(self):
        coeffs, f = scalar_instance(GainSpec('constant', 1.0, level=0.5))
        field = obstacle.solve_psor(coeffs, f, self.dom, 10)
        self.assertLess(obstacle.complementarity_residual(field, coeffs, f)['sup'], 1e-12)

    def test_deterministic_motion(self):
        # No noise and no drift: the state stays put, so U(0, x) = sup_t Theta(t, x).
        gain = GainSpec('put', 1.0, ell=[1.0], strike=1.0, cap=1.0,
                        time_factor=TimeFactor('affine', h0=0.5, h1=0.5))
        coeffs, f = scalar_instance(gain, a=0.0, gamma=0.0, epsilon=0.0)
        result = obstacle.domain_sweep(coeffs, f, obstacle.DomainSpec(3.0, 61), [3.0, 5.0], [[0.5]], 10)
        np.testing.assert_allclose(result['values'], 0.5, atol=1e-8)


class TestPutInstance(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.coeffs, cls.f = scalar_instance(put_gain())
        cls.dom = obstacle.DomainSpec(5.0, 201)
        cls.steps = 50
        cls.psor = obstacle.solve_psor(cls.coeffs, cls.f, cls.dom, cls.steps)

    def test_psor_complementarity(self):
        residual = obstacle.complementarity_residual(self.psor, self.coeffs, self.f)
        self.assertLess(residual['sup'], 10.0 * obstacle.PSOR_TOL)
        self.assertEqual(residual['values'].shape, (self.steps, self.dom.interior.size))

    def test_value_bounds(self):
        report = obstacle.value_bounds(self.psor, 1.0)
        self.assertTrue(report['passed'])
        self.assertTrue(report['terminal_exact'])
        self.assertTrue(report['boundary_exact'])
        self.assertTrue(obstacle.contact_nonempty(self.psor))

    def test_value_dominates_gain(self):
        U = self.psor.probe([[-1.0], [0.0], [0.5], [1.0]], 0, 'U')
        theta = put_gain().value(0.0, np.array([[-1.0], [0.0], [0.5], [1.0]]))
        self.assertTrue(np.all(U >= theta - 1e-12))
        self.assertTrue(np.all(U <= 1.0 + 1e-12))

    def test_penalized_agrees_with_psor(self):
        field = obstacle.solve_penalized(self.coeffs, self.f, self.dom,
                                         obstacle.PenaltyParams(1e-5, self.steps))
        self.assertLessEqual(float(np.max(np.abs(field.u - self.psor.u))), 1e-3)
        self.assertTrue(obstacle.value_bounds(field, 1.0)['passed'])

    def test_corrupted_field(self):
        node = int(np.flatnonzero(np.isclose(self.dom.points[:, 0], 0.0))[0])
        position = int(np.flatnonzero(self.dom.interior == node)[0])
        u = self.psor.u.copy()
        u[0, node] += 0.1
        corrupted = obstacle.ValueField(self.psor.times, u, self.psor.gain, self.dom,
                                        self.psor.meta, forcing=self.psor.forcing)
        residual = obstacle.complementarity_residual(corrupted, self.coeffs, self.f)
        self.assertGreaterEqual(residual['sup'], 0.05)
        self.assertGreaterEqual(residual['values'][0, position], 0.05)
        self.assertEqual(residual['step'], 0)

    def test_penalty_sweep(self):
        result = obstacle.penalty_sweep(self.coeffs, self.f, self.dom, [1e-2, 1e-3, 1e-4],
                                        self.steps, psor_field=self.psor)
        self.assertTrue(result['decreasing'])
        self.assertEqual([row['epsilon'] for row in result['rows']], [1e-2, 1e-3, 1e-4])
        self.assertLess(result['rows'][-1]['distance_to_psor'], 1e-3)

    def test_norm_audit(self):
        mu = GaussianMeasure([1.0])
        audit = obstacle.norm_audit(self.psor, put_gain(), mu)
        self.assertTrue(audit['within_bound'])
        self.assertAlmostEqual(audit['bound'], 2.0)
        self.assertGreater(audit['u'].value, 0.0)
        self.assertGreater(audit['grad'].value, 0.0)

    def test_lipschitz_profile(self):
        slopes = obstacle.lipschitz_profile(self.psor)
        self.assertEqual(slopes.shape, (self.steps + 1,))
        self.assertLessEqual(float(slopes.max()), 1.05)

    def test_write_and_read(self):
        with tempfile.TemporaryDirectory() as tmp_dirname:
            filename = os.path.join(tmp_dirname, 'field.bin')
            obstacle.write_field(self.psor, filename)
            with open(filename, 'rb') as fh:
                self.assertEqual(fh.read(4), b'SLVF')
            field = obstacle.read_field(filename)

        np.testing.assert_array_equal(field.u, self.psor.u)
        np.testing.assert_allclose(field.U, self.psor.U, atol=1e-14)
        self.assertEqual(field.dom.counts, self.dom.counts)
        self.assertEqual(field.meta['method'], 'psor')

    def test_probe_file(self):
        with tempfile.TemporaryDirectory() as tmp_dirname:
            filename = os.path.join(tmp_dirname, 'probes.csv')
            obstacle.write_probes(self.psor, [[0.0], [1.0]], filename, every=self.steps)
            with open(filename) as fh:
                lines = fh.read().splitlines()
        self.assertEqual(lines[0], 't,x1,u,U,theta')
        self.assertEqual(len(lines), 5)


class TestPutTruncation(unittest.TestCase):
    # The ball edge sits where the put still has time value, so the radius matters.
    @classmethod
    def setUpClass(cls):
        cls.coeffs, cls.f = scalar_instance(put_gain())
        cls.dom = obstacle.DomainSpec(1.25, 101)
        cls.radii = [1.25, 1.75, 2.5]
        cls.points = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
        cls.result = obstacle.domain_sweep(cls.coeffs, cls.f, cls.dom, cls.radii, cls.points, 50)

    def test_radii_resolve_truncation(self):
        self.assertTrue(self.result['resolved'])
        self.assertTrue(self.result['monotone'])
        self.assertTrue(self.result['stabilizing'])

    def test_differences_shrink_at_every_point(self):
        steps = self.result['probe_differences']
        self.assertEqual(steps.shape, (2, 5))
        self.assertTrue(np.all(steps[-1] <= 0.25 * steps[-2] + 1e-8), steps)
        self.assertGreater(steps[0, -1], 1e-3)

    def test_contact_points_do_not_move(self):
        np.testing.assert_allclose(self.result['values'][:, :3], 1.0, atol=1e-6)

    def test_penalized_sweep(self):
        result = obstacle.domain_sweep(self.coeffs, self.f, self.dom, self.radii[:2], self.points, 50,
                                       method='penalized', epsilon=1e-5)
        np.testing.assert_allclose(result['values'], self.result['values'][:2], atol=1e-3)

    def test_penalized_sweep_needs_level(self):
        with self.assertRaises(ValidationError):
            obstacle.domain_sweep(self.coeffs, self.f, self.dom, self.radii, self.points, 50,
                                  method='penalized')

    def test_unknown_method(self):
        with self.assertRaises(ValidationError):
            obstacle.domain_sweep(self.coeffs, self.f, self.dom, self.radii, self.points, 50,
                                  method='lattice')


class TestStrictlyDecreasing(unittest.TestCase):
    def test_strict(self):
        self.assertTrue(obstacle.strictly_decreasing([3.0, 2.0, 1.0]))

    def test_plateau(self):
        self.assertFalse(obstacle.strictly_decreasing([3.0, 3.0, 1.0]))

    def test_all_zero(self):
        self.assertTrue(obstacle.strictly_decreasing([0.0, 0.0, 0.0]))

    def test_missing_penalty_level(self):
        with self.assertRaises(ValidationError):
            obstacle.PenaltyParams(None, 10)
        with self.assertRaises(ValidationError):
            obstacle.PenaltyParams(0.0, 10)


class TestSweepInputs(unittest.TestCase):
    def setUp(self):
        self.coeffs, self.f = scalar_instance(GainSpec('constant', 1.0, level=0.7))
        self.dom = obstacle.DomainSpec(3.0, 31)

    def test_constant_gain_penalty_levels(self):
        result = obstacle.penalty_sweep(self.coeffs, self.f, self.dom, [1e-2, 1e-3, 1e-4], 10)
        for row in result['rows']:
            self.assertLess(row['negative_part'], 1e-12)
            self.assertLess(row['distance_to_psor'], 1e-12)

    def test_increasing_epsilons(self):
        with self.assertRaises(ValidationError):
            obstacle.penalty_sweep(self.coeffs, self.f, self.dom, [1e-4, 1e-3, 1e-2], 10)

    def test_too_few_epsilons(self):
        with self.assertRaises(ValidationError):
            obstacle.penalty_sweep(self.coeffs, self.f, self.dom, [1e-2, 1e-3], 10)

    def test_constant_gain_radii(self):
        result = obstacle.domain_sweep(self.coeffs, self.f, self.dom, [3.0, 5.0, 8.0], [[0.0], [1.0]], 10)
        np.testing.assert_allclose(result['values'], 0.7)
        self.assertTrue(result['monotone'])
        self.assertTrue(result['stabilizing'])
        self.assertFalse(result['resolved'])

    def test_radii_must_increase(self):
        with self.assertRaises(ValidationError):
            obstacle.domain_sweep(self.coeffs, self.f, self.dom, [5.0, 3.0], [[0.0]], 10)

    def test_probe_outside_ball(self):
        with self.assertRaises(ValidationError):
            obstacle.domain_sweep(self.coeffs, self.f, self.dom, [3.0, 5.0], [[3.5]], 10)

    def test_refinement_levels(self):
        with self.assertRaises(ValidationError):
            obstacle.grid_refinement_study(self.coeffs, self.f, 3.0, 11, 5, [[0.0]], levels=2)

    def test_explicit_step_limit(self):
        params = obstacle.PenaltyParams(1e-3, 2, explicit=True)
        with self.assertRaises(StabilityError):
            obstacle.solve_penalized(self.coeffs, self.f, obstacle.DomainSpec(3.0, 301), params)

    def test_zero_field_norms(self):
        field = obstacle.solve_psor(self.coeffs, self.f, self.dom, 10)
        audit = obstacle.norm_audit(field, GainSpec('constant', 1.0, level=0.7), GaussianMeasure([1.0]))
        self.assertAlmostEqual(audit['u'].value, 0.0, places=10)
        self.assertAlmostEqual(audit['grad'].value, 0.0, places=10)
        self.assertAlmostEqual(audit['time'].value, 0.0, places=10)


if __name__ == '__main__':
    unittest.main()
