import math
import unittest

import numpy as np

from stopladder import obstacle, operators, ou, sde
from stopladder.errors import AssumptionError, ContractError
from stopladder.measures import PolynomialField, random_polynomial
from stopladder.models import CovarianceSpec, DiffusionSpec, GainSpec, OperatorSpec, TimeFactor


def ou_model(entries, lambdas, noise='q_wiener'):
    op = OperatorSpec('diagonal', entries)
    cov = CovarianceSpec(lambdas)
    drift = operators.yosida(op, math.inf, len(entries))
    model = sde.FiniteModel(drift, DiffusionSpec('constant', np.zeros(len(entries))), cov, 0.0, 1.0,
                            noise=noise)
    return model, ou.invariant_covariance(op, cov)


class TestInvariantCovariance(unittest.TestCase):
    def test_closed_form(self):
        inv = ou.invariant_covariance(OperatorSpec('diagonal', [-1.0, -2.0]), CovarianceSpec([2.0, 1.0]))
        np.testing.assert_allclose(inv.gamma_diag, [1.0, 0.25])
        self.assertEqual(inv.m, 1.0)
        self.assertAlmostEqual(inv.trace, 1.25)
        self.assertAlmostEqual(inv.trace_q_a_inv, 2.5)

    def test_positive_entry(self):
        with self.assertRaises(AssumptionError):
            ou.invariant_covariance(OperatorSpec('diagonal', [1.0]), CovarianceSpec([1.0]))

    def test_dense_operator(self):
        with self.assertRaises(AssumptionError):
            ou.invariant_covariance(OperatorSpec('dense', [[-1.0]]), CovarianceSpec([1.0]))


class TestEmpiricalInvariant(unittest.TestCase):
    def test_relaxed_covariance(self):
        model, inv = ou_model([-1.0, -2.0], [2.0, 1.0])
        report = ou.empirical_invariant_check(model, inv, 20000, seed=1)
        self.assertTrue(report['passed'], report['rows'])
        self.assertEqual([row['coordinate'] for row in report['rows']], [1, 2])
        self.assertEqual(report['cross'][0]['pair'], (1, 2))
        self.assertEqual(report['steps'], 3200)

    def test_started_at_invariant_law(self):
        model, inv = ou_model([-1.0, -2.0], [2.0, 1.0])
        report = ou.empirical_invariant_check(model, inv, 20000, seed=2, horizon=1.0, from_invariant=True)
        self.assertTrue(report['stationary'])
        self.assertTrue(report['passed'], report['rows'])

    def test_needs_q_wiener_noise(self):
        model, inv = ou_model([-1.0], [1.0], noise='cylindrical')
        with self.assertRaises(ContractError):
            ou.empirical_invariant_check(model, inv, 10, seed=1)


class TestSymmetricForm(unittest.TestCase):
    def setUp(self):
        self.inv = ou.invariant_covariance(OperatorSpec('diagonal', [-1.0, -2.0]), CovarianceSpec([2.0, 1.0]))

    def test_identity_in_one_dimension(self):
        inv = ou.invariant_covariance(OperatorSpec('diagonal', [-0.5]), CovarianceSpec([3.0]))
        identity = PolynomialField({(1,): 1.0}, 1)
        self.assertAlmostEqual(ou.symmetric_form(identity, identity, inv), 1.5, places=12)

    def test_symmetry(self):
        for seed in range(5):
            u = random_polynomial(2, 3, seed=seed)
            w = random_polynomial(2, 3, seed=seed + 100)
            difference = ou.symmetric_form(u, w, self.inv) - ou.symmetric_form(w, u, self.inv)
            self.assertAlmostEqual(difference, 0.0, places=10)

    def test_non_negative(self):
        for seed in range(100):
            u = random_polynomial(2, 3, seed=seed)
            witness = ou.coercivity_witness(u, self.inv, nodes=16)
            self.assertGreaterEqual(witness['form'], 0.0)
            self.assertTrue(witness['holds'])
            self.assertGreater(witness['mass'], 0.0)

    def test_dual_pairing(self):
        theta = random_polynomial(2, 3, seed=7)
        w = random_polynomial(2, 2, seed=8)
        report = ou.dual_pairing_check(theta, TimeFactor('discount', rate=0.3), w, self.inv, 0.4)
        self.assertLess(report['residual'], 1e-10)

    def test_generator_of_quadratic(self):
        # L x_1^2 = lambda_1 + 2 a_1 x_1^2
        field = PolynomialField({(2, 0): 1.0}, 2)
        X = np.array([[0.5, 3.0]])
        self.assertAlmostEqual(float(self.inv.generator(field, X)[0]), 2.0 - 0.5)


class TestSolverAgreement(unittest.TestCase):
    def test_psor_against_penalized(self):
        op = OperatorSpec('diagonal', [-1.0, -2.0])
        cov = CovarianceSpec([2.0, 1.0])
        inv = ou.invariant_covariance(op, cov)
        drift = operators.yosida(op, math.inf, 2)
        coeffs = operators.generator_coeffs(drift, DiffusionSpec('constant', [0.0, 0.0]), cov, 0.0,
                                            noise='q_wiener')
        gain = GainSpec('put', 1.0, ell=[1.0, 0.0], strike=0.0, cap=1.0)
        f = operators.forcing(gain, coeffs)
        dom = obstacle.DomainSpec(4.0, 41, 2)

        psor = obstacle.solve_psor(coeffs, f, dom, 20)
        penalized = obstacle.solve_penalized(coeffs, f, dom, obstacle.PenaltyParams(1e-6, 20))
        self.assertEqual(ou.solver_agreement(psor, psor, inv), 0.0)
        self.assertLess(ou.solver_agreement(psor, penalized, inv), 1e-3)


if __name__ == '__main__':
    unittest.main()
