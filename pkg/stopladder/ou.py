"""
Symmetric Ornstein-Uhlenbeck case: dX = A X dt + Q^{1/2} dW with A, Q
diagonal and A negative, invariant Gaussian nu with covariance
Gamma = -1/2 A^{-1} Q and the symmetric form a_nu(u, w) = 1/2 int <Q Du, Dw> dnu.
"""

import math

import numpy as np

from . import utils
from .errors import AssumptionError, ContractError
from .measures import GaussianMeasure, default_method
from .obstacle import measure_weights
from .sde import FiniteModel, simulate_paths

STATIONARITY_HEADERS = ['coordinate', 'gamma_theory', 'gamma_empirical', 'stderr', 'horizon', 'paths']

# Relaxation horizon in units of 1/m.
RELAXATION_TIMES = 8.0

# Euler steps per unit of |a|_max * horizon.
STEPS_PER_RATE = 200


class InvariantMeasure(object):

    def __init__(self, gamma_diag, a, lambdas):
        self.gamma_diag = np.asarray(gamma_diag, dtype=float)
        self.a = np.asarray(a, dtype=float)
        self.lambdas = np.asarray(lambdas, dtype=float)
        self.measure = GaussianMeasure(self.gamma_diag)

    @property
    def n(self):
        return self.gamma_diag.size

    @property
    def m(self):
        """Spectral gap: a_i <= -m for every coordinate."""
        return float(-np.max(self.a))

    @property
    def trace(self):
        return math.fsum(self.gamma_diag)

    @property
    def trace_q_a_inv(self):
        return math.fsum(self.lambdas / np.abs(self.a))

    def generator(self, field, X):
        """L u = 1/2 sum lambda_i d_ii u + sum a_i x_i d_i u."""
        X = np.atleast_2d(X)
        second = 0.5 * np.einsum('i,mii->m', self.lambdas, field.hess(X))
        first = np.sum(self.a * X * field.grad(X), axis=1)
        return second + first

    def to_object(self):
        return {
            'gamma': self.gamma_diag.tolist(),
            'm': self.m,
            'trace': self.trace,
            'trace_q_a_inv': self.trace_q_a_inv,
        }


def invariant_covariance(op, cov, n=None):
    """gamma_i = lambda_i / (2 |a_i|) for diagonal A with negative entries."""
    if not op.is_diagonal:
        raise AssumptionError("the symmetric case needs a diagonal operator")
    n = n or op.size
    a = np.asarray(op.entries[:n], dtype=float)
    if np.any(a >= 0):
        bad = int(np.flatnonzero(a >= 0)[0])
        raise AssumptionError(
            "A must be negative: a_{} = {} is not below zero".format(bad + 1, a[bad]))
    lambdas = np.asarray(cov.lambdas[:n], dtype=float)
    return InvariantMeasure(lambdas / (2.0 * np.abs(a)), a, lambdas)


def _variance_stderr(values):
    """Sample second moment of centred values and its standard error."""
    second = float(np.mean(values ** 2))
    fourth = float(np.mean(values ** 4))
    return second, math.sqrt(max(fourth - second ** 2, 0.0) / values.size)


def empirical_invariant_check(model, inv, n_paths, seed, horizon=None, steps=None,
                              checkpoints=4, from_invariant=False, jobs=1):
    """
    Simulate the Q-Wiener model for RELAXATION_TIMES / m and compare the
    empirical covariance at the last time with diag(gamma). Starting from
    the invariant law also compares every checkpoint.
    """
    if model.noise != 'q_wiener':
        raise ContractError("the invariant-measure check needs a model with Q-Wiener noise")
    horizon = horizon or RELAXATION_TIMES / inv.m
    if steps is None:
        steps = int(math.ceil(STEPS_PER_RATE * horizon * float(np.max(np.abs(inv.a)))))
    relaxed = FiniteModel(model.drift, model.diffusion, model.cov, model.epsilon_n,
                          horizon, noise='q_wiener', scheme=model.scheme)
    record = [int(round(steps * (c + 1) / float(checkpoints))) for c in range(checkpoints)]
    bundle = simulate_paths(
        relaxed, np.zeros(model.n), 0.0, steps, n_paths, seed, record=record,
        retain_increments=False, initial_law=inv.measure if from_invariant else None, jobs=jobs)

    final = bundle.paths[:, -1, :]
    rows = []
    passed = True
    for i in range(model.n):
        value, stderr = _variance_stderr(final[:, i])
        rows.append({
            'coordinate': i + 1,
            'gamma_theory': float(inv.gamma_diag[i]),
            'gamma_empirical': value,
            'stderr': stderr,
            'horizon': horizon,
            'paths': n_paths,
        })
        passed &= abs(value - inv.gamma_diag[i]) <= 3 * stderr

    cross = []
    for i in range(model.n):
        for j in range(i + 1, model.n):
            product = final[:, i] * final[:, j]
            stderr = float(np.std(product, ddof=1) / math.sqrt(n_paths))
            mean = float(np.mean(product))
            cross.append({'pair': (i + 1, j + 1), 'covariance': mean, 'stderr': stderr})
            passed &= abs(mean) <= 3 * stderr

    stationary = True
    if from_invariant:
        for position in range(1, bundle.paths.shape[1]):
            for i in range(model.n):
                value, stderr = _variance_stderr(bundle.paths[:, position, i])
                stationary &= abs(value - inv.gamma_diag[i]) <= 3 * stderr

    utils.debug("Invariant check over horizon {} with {} steps: {}".format(horizon, steps, passed))
    return {'rows': rows, 'cross': cross, 'passed': bool(passed), 'stationary': bool(stationary),
            'steps': steps}


def symmetric_form(u, w, inv, method=None, nodes=None):
    """a_nu(u, w) = 1/2 int <Q Du, Dw> dnu."""
    mu = inv.measure
    method = method or default_method(mu)

    def integrand(X):
        return 0.5 * np.sum(inv.lambdas * u.grad(X) * w.grad(X), axis=1)

    value, _, _ = mu.expect(integrand, method, nodes)
    return value


def inner(u, w, inv, method=None, nodes=None):
    mu = inv.measure
    value, _, _ = mu.expect(lambda X: u.value(X) * w.value(X), method or default_method(mu), nodes)
    return value


def coercivity_witness(u, inv, eta=1.0, nodes=None):
    """a_nu(u, u) + eta (u, u)_nu >= eta (u, u)_nu, i.e. a_nu(u, u) >= 0."""
    form = symmetric_form(u, u, inv, nodes=nodes)
    mass = inner(u, u, inv, nodes=nodes)
    return {'form': form, 'mass': mass, 'holds': bool(form + eta * mass >= eta * mass)}


def dual_pairing_check(theta, time_factor, w, inv, t, nodes=None):
    """
    (f(t), w)_nu computed directly against (dTheta/dt, w)_nu - a_nu(Theta(t), w)
    for Theta(t, x) = h(t) p(x) with a polynomial p.
    """
    mu = inv.measure
    method = default_method(mu)
    h = time_factor(t)
    dh = time_factor.derivative(t)

    def forcing(X):
        return dh * theta.value(X) + h * inv.generator(theta, X)

    direct, _, _ = mu.expect(lambda X: forcing(X) * w.value(X), method, nodes)
    pairing = dh * inner(theta, w, inv, method, nodes) - h * symmetric_form(theta, w, inv, method, nodes)
    return {'direct': direct, 'pairing': pairing, 'residual': abs(direct - pairing)}


def solver_agreement(field_a, field_b, inv):
    """L2(nu) distance between two value fields on the same grid, averaged over time."""
    dom = field_a.dom
    weights = measure_weights(dom, inv.gamma_diag)
    difference = field_a.U[:, dom.interior] - field_b.U[:, dom.interior]
    return math.sqrt(float(np.mean(difference ** 2 @ weights)))
