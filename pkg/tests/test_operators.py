import math
import unittest

import numpy as np

from stopladder import operators
from stopladder.errors import DimensionError, ValidationError
from stopladder.measures import GaussianMeasure, PolynomialField, random_polynomial, seeded_generator
from stopladder.models import CovarianceSpec, DiffusionSpec, GainSpec, OperatorSpec, TimeFactor


def scalar_coeffs(a=-1.0, gamma=0.5, lam=1.0, epsilon=0.1, noise='cylindrical'):
    op = OperatorSpec('diagonal', [a])
    drift = operators.yosida(op, math.inf, 1)
    return operators.generator_coeffs(
        drift, DiffusionSpec('constant', [gamma]), CovarianceSpec([lam]), epsilon, noise)


class TestYosida(unittest.TestCase):
    def test_diagonal_entries(self):
        op = OperatorSpec('diagonal', [-2.0, 0.0, -1.0])
        self.assertAlmostEqual(operators.yosida(op, 2.0, 1).matrix[0, 0], -1.0)
        self.assertEqual(operators.yosida(op, 2.0, 2).matrix[1, 1], 0.0)

    def test_large_alpha(self):
        op = OperatorSpec('diagonal', [-1.0])
        entry = operators.yosida(op, 1000.0, 1).matrix[0, 0]
        self.assertAlmostEqual(entry, -1000.0 / 1001.0, places=12)
        self.assertAlmostEqual(entry, -0.999001, places=6)

    def test_infinite_alpha_is_the_operator(self):
        op = OperatorSpec('diagonal', [-1.0, -3.0])
        np.testing.assert_array_equal(operators.yosida(op, math.inf, 2).matrix, np.diag([-1.0, -3.0]))

    def test_dense_agrees_with_diagonal(self):
        entries = [-1.0, -2.0, -4.0]
        diagonal = operators.yosida(OperatorSpec('diagonal', entries), 5.0, 2)
        dense = operators.yosida(OperatorSpec('dense', np.diag(entries)), 5.0, 2)
        np.testing.assert_allclose(dense.matrix, diagonal.matrix, atol=1e-12)
        self.assertAlmostEqual(dense.tail, 0.0, places=12)

    def test_dense_projection_tail(self):
        A = np.array([[-1.0, 1.0], [0.0, -1.0]])
        reduced = operators.yosida(OperatorSpec('dense', A), math.inf, 1)
        self.assertAlmostEqual(reduced.tail, 1.0)
        self.assertEqual(reduced.matrix.shape, (1, 1))

    def test_non_positive_alpha(self):
        with self.assertRaises(ValidationError):
            operators.yosida(OperatorSpec('diagonal', [-1.0]), 0.0, 1)

    def test_dimension(self):
        with self.assertRaises(DimensionError):
            operators.yosida(OperatorSpec('diagonal', [-1.0]), 1.0, 2)


class TestProjectGain(unittest.TestCase):
    def test_leading_coordinate_gain(self):
        gain = GainSpec('put', 1.0, ell=[1.0], strike=1.0, cap=1.0)
        reduced = operators.project_gain(gain, 3, 3)
        X = np.array([[0.5, 7.0, -2.0]])
        np.testing.assert_allclose(reduced.value(0.0, X), gain.value(0.0, X[:, :1]))

    def test_truncated_direction(self):
        gain = GainSpec('put', 1.0, ell=[1.0, 0.5, 0.25], strike=0.5, cap=1.0)
        truncated = GainSpec('put', 1.0, ell=[1.0, 0.5], strike=0.5, cap=1.0)
        reduced = operators.project_gain(gain, 2)
        X = seeded_generator(11).standard_normal((100, 2))
        np.testing.assert_allclose(reduced.value(0.3, X), truncated.value(0.3, X))
        self.assertEqual(reduced.gradient(0.3, X).shape, (100, 2))

    def test_constant_gain(self):
        gain = GainSpec('constant', 1.0, level=0.7)
        reduced = operators.project_gain(gain, 2, 4)
        np.testing.assert_allclose(reduced.value(0.0, np.ones((3, 2))), 0.7)


class TestGeneratorCoefficients(unittest.TestCase):
    def test_scalar_diffusion(self):
        coeffs = scalar_coeffs()
        self.assertAlmostEqual(float(coeffs.B(np.array([[1.0]]))[0, 0, 0]), 0.26)
        self.assertAlmostEqual(float(coeffs.min_eigenvalue(np.array([[0.0]]))[0]), 0.26)

    def test_scalar_drift_coefficient(self):
        coeffs = scalar_coeffs()
        self.assertAlmostEqual(float(coeffs.cbar(np.array([[1.0]]))[0, 0]), 0.87)

    def test_saturated_divergence(self):
        cov = CovarianceSpec([1.0, 0.5])
        diffusion = DiffusionSpec('saturated', [0.3, 0.2], slope=[0.1, 0.05], scale=1.0)
        drift = operators.yosida(OperatorSpec('diagonal', [-1.0, -2.0]), math.inf, 2)
        coeffs = operators.generator_coeffs(drift, diffusion, cov, 0.05)

        x = np.array([0.4, -0.3])
        h = 1e-5
        divergence = np.zeros(2)
        for j in range(2):
            shift = np.zeros(2)
            shift[j] = h
            upper = coeffs.B(x + shift)[0]
            lower = coeffs.B(x - shift)[0]
            divergence += (upper[:, j] - lower[:, j]) / (2.0 * h)
        np.testing.assert_allclose(coeffs.divergence(x)[0], divergence, atol=1e-8)

    def test_q_wiener_noise(self):
        coeffs = scalar_coeffs(a=-0.5, lam=2.0, noise='q_wiener')
        self.assertEqual(float(coeffs.B(np.zeros((1, 1)))[0, 0, 0]), 2.0)

    def test_negative_epsilon(self):
        with self.assertRaises(ValidationError):
            scalar_coeffs(epsilon=-0.1)


class TestForcing(unittest.TestCase):
    def test_constant_gain(self):
        gain = GainSpec('constant', 1.0, level=0.7)
        f = operators.forcing(gain, scalar_coeffs())
        np.testing.assert_allclose(f(0.3, np.linspace(-2, 2, 5)[:, None]), 0.0)

    def test_decaying_gain(self):
        gain = GainSpec('constant', 1.0, level=1.0, time_factor=TimeFactor('affine', h0=1.0, h1=-1.0))
        f = operators.forcing(gain, scalar_coeffs())
        np.testing.assert_allclose(f(0.3, np.linspace(-2, 2, 5)[:, None]), -1.0)

    def test_put_matches_finite_differences(self):
        gain = GainSpec('put', 1.0, ell=[1.0], strike=1.0, cap=1.0)
        coeffs = scalar_coeffs(a=-0.05, gamma=0.3, epsilon=0.01)
        f = operators.forcing(gain, coeffs)

        x = 0.4
        h = 1e-4
        values = gain.value(0.0, np.array([[x - h], [x], [x + h]]))
        second = (values[2] - 2.0 * values[1] + values[0]) / h ** 2
        first = (values[2] - values[0]) / (2.0 * h)
        b = float(coeffs.B(np.array([[x]]))[0, 0, 0])
        expected = 0.5 * b * second + (-0.05 * x) * first
        self.assertAlmostEqual(float(f(0.0, np.array([[x]]))[0]), expected, places=6)


class TestBilinearForm(unittest.TestCase):
    def setUp(self):
        self.mu = GaussianMeasure([1.0])
        self.identity = PolynomialField({(1,): 1.0}, 1)

    def test_constant_field(self):
        constant = PolynomialField({(0,): 3.0}, 1)
        form = operators.bilinear_form(scalar_coeffs(), constant, self.identity, self.mu)
        self.assertEqual(form, 0.0)

    def test_unit_diffusion(self):
        # B = Q = 1 and a = -1/2 make the Gauss-weighted drift vanish.
        coeffs = scalar_coeffs(a=-0.5, lam=1.0, noise='q_wiener')
        np.testing.assert_allclose(coeffs.cbar(np.array([[1.3]])), 0.0, atol=1e-15)
        form = operators.bilinear_form(coeffs, self.identity, self.identity, self.mu)
        self.assertAlmostEqual(form, 0.5, places=12)

    def test_green_identity(self):
        coeffs = scalar_coeffs()
        self.assertLess(operators.green_residual(coeffs, self.identity, self.identity, self.mu), 1e-10)

    def test_green_identity_random_polynomials(self):
        cov = CovarianceSpec([1.0, 0.5])
        drift = operators.yosida(OperatorSpec('diagonal', [-1.0, -2.0]), 4.0, 2)
        coeffs = operators.generator_coeffs(drift, DiffusionSpec('constant', [0.4, 0.2]), cov, 0.1)
        mu = GaussianMeasure(cov.lambdas)
        u = random_polynomial(2, 3, seed=1)
        w = random_polynomial(2, 2, seed=2)
        self.assertLess(operators.green_residual(coeffs, u, w, mu), 1e-8)

    def test_continuity_check(self):
        mu = GaussianMeasure([1.0])
        pairs = [(random_polynomial(1, 3, seed=k), random_polynomial(1, 3, seed=k + 50)) for k in range(6)]
        result = operators.continuity_check(scalar_coeffs(), pairs, pairs[:3], mu, 2)
        self.assertGreater(result['constant'], 0.0)
        self.assertTrue(result['passed'])


class TestTraceDiagnostics(unittest.TestCase):
    def test_geometric(self):
        N = 20
        op = OperatorSpec('diagonal', -np.ones(N))
        cov = CovarianceSpec(2.0 ** -np.arange(1, N + 1))
        rows = operators.trace_diagnostics(op, cov)
        self.assertAlmostEqual(rows[-1]['trAQA_partial'], 1.0 - 2.0 ** -20, places=12)
        self.assertFalse(rows[-1]['assumption_flag'])

    def test_basel(self):
        N = 100
        i = np.arange(1, N + 1, dtype=float)
        rows = operators.trace_diagnostics(OperatorSpec('diagonal', -i), CovarianceSpec(i ** -4))
        self.assertAlmostEqual(rows[-1]['trAQA_partial'], 1.63498, places=5)
        self.assertFalse(rows[-1]['assumption_flag'])

    def test_divergent(self):
        N = 50
        i = np.arange(1, N + 1, dtype=float)
        rows = operators.trace_diagnostics(OperatorSpec('diagonal', -i), CovarianceSpec(i ** -2))
        self.assertAlmostEqual(rows[-1]['trAQA_partial'], float(N))
        self.assertTrue(rows[-1]['assumption_flag'])
        self.assertEqual(rows[-1]['level'], N)

    def test_size_mismatch(self):
        with self.assertRaises(DimensionError):
            operators.trace_diagnostics(OperatorSpec('diagonal', [-1.0]), CovarianceSpec([1.0, 0.5]))


if __name__ == '__main__':
    unittest.main()
