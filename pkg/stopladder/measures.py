"""
Gaussian measure machinery on the reduced space R^n and the Gauss-Sobolev
norms built on it.

Scalar fields are vectorized callables: they take an (m, n) array of points
and return an (m,) array; gradients return (m, n), Hessians (m, n, n).
"""

import itertools
import math

import numpy as np
from numpy.polynomial import hermite_e

from . import utils
from .errors import DimensionError, ExponentError, NumericError
from .models import NormReport

# Gauss-Hermite nodes per axis.
DEFAULT_NODES = 64

# Tensor rules are thinned per axis beyond this many points.
MAX_TENSOR_NODES = 2 ** 21

# Tensor quadrature is only offered up to this dimension.
MAX_HERMITE_DIM = 4

DEFAULT_SAMPLES = 200000


def seeded_generator(*keys):
    """Counter-based generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


class GaussianMeasure(object):
    """Centered product Gaussian on R^n with the given per-axis variances."""

    def __init__(self, variances, cov=None):
        variances = np.array(variances, dtype=float).ravel()
        if variances.size == 0 or np.any(variances <= 0):
            raise NumericError("Gaussian variances must be positive")
        self.variances = variances
        self.variances.setflags(write=False)
        self.cov = cov

    @property
    def n(self):
        return self.variances.size

    def density(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        norm = np.prod(2.0 * math.pi * self.variances) ** -0.5
        return norm * np.exp(-0.5 * np.sum(X ** 2 / self.variances, axis=1))

    def sample(self, size, seed=0):
        rng = seeded_generator(seed, 0xA11)
        return rng.standard_normal((size, self.n)) * np.sqrt(self.variances)

    def axis_nodes(self, nodes=None):
        if nodes is None:
            nodes = DEFAULT_NODES
        per_axis = int(math.floor(MAX_TENSOR_NODES ** (1.0 / self.n)))
        return max(2, min(nodes, per_axis))

    def hermite_rule(self, nodes=None):
        """Tensor Gauss-Hermite points and weights summing to one."""
        if self.n > MAX_HERMITE_DIM:
            raise DimensionError(
                "tensor Gauss-Hermite is limited to n <= {} (got n={})".format(MAX_HERMITE_DIM, self.n))
        k = self.axis_nodes(nodes)
        z, w = hermite_e.hermegauss(k)
        w = w / math.sqrt(2.0 * math.pi)

        grids = np.meshgrid(*([z] * self.n), indexing='ij')
        points = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(self.variances)
        weights = np.ones(points.shape[0])
        for axis_weights in np.meshgrid(*([w] * self.n), indexing='ij'):
            weights = weights * axis_weights.ravel()
        return points, weights

    def expect(self, fn, method='hermite', nodes=None, samples=DEFAULT_SAMPLES, seed=0):
        """
        Integral of fn against the measure.

        Returns (value, stderr, count); stderr is zero for quadrature.
        """
        if method == 'hermite':
            points, weights = self.hermite_rule(nodes)
            values = np.asarray(fn(points), dtype=float)
            _check_finite(values, points)
            return float(np.dot(weights, values)), 0.0, points.shape[0]
        if method == 'monte-carlo':
            points = self.sample(samples, seed)
            values = np.asarray(fn(points), dtype=float)
            _check_finite(values, points)
            stderr = float(np.std(values, ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
            return float(np.mean(values)), stderr, samples
        raise ValueError("unknown quadrature method {!r}".format(method))

    def to_object(self):
        return {'n': self.n, 'variances': self.variances.tolist()}


def _check_finite(values, points):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericError(
            "non-finite integrand at point {}".format(points[bad[0]].tolist()))


def build_measure(cov, n):
    cov.check_dimension(n)
    return GaussianMeasure(cov.lambdas[:n], cov=cov)


def default_method(mu):
    return 'hermite' if mu.n <= MAX_HERMITE_DIM else 'monte-carlo'


class ScalarField(object):
    """A scalar field together with its gradient (and optionally Hessian)."""

    def __init__(self, value, grad, hess=None, name='field'):
        self.value = value
        self.grad = grad
        self.hess = hess
        self.name = name

    def __call__(self, X):
        return self.value(X)


class PolynomialField(ScalarField):
    """Polynomial sum_k c_k prod_i x_i^{e_ki} with closed-form derivatives."""

    def __init__(self, terms, n, name='polynomial'):
        self.terms = [(tuple(exps), float(c)) for exps, c in terms.items()]
        for exps, _ in self.terms:
            if len(exps) != n:
                raise DimensionError("exponent tuple {} does not match n={}".format(exps, n))
        self.n = n
        super().__init__(self._value, self._grad, self._hess, name=name)

    @staticmethod
    def _monomial(X, exps):
        out = np.ones(X.shape[0])
        for i, e in enumerate(exps):
            if e:
                out = out * X[:, i] ** e
        return out

    def _value(self, X):
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0])
        for exps, c in self.terms:
            out += c * self._monomial(X, exps)
        return out

    def _grad(self, X):
        X = np.atleast_2d(X)
        out = np.zeros(X.shape)
        for exps, c in self.terms:
            for i, e in enumerate(exps):
                if e:
                    lowered = list(exps)
                    lowered[i] -= 1
                    out[:, i] += c * e * self._monomial(X, lowered)
        return out

    def _hess(self, X):
        X = np.atleast_2d(X)
        out = np.zeros((X.shape[0], self.n, self.n))
        for exps, c in self.terms:
            for i, j in itertools.product(range(self.n), repeat=2):
                lowered = list(exps)
                factor = lowered[i]
                lowered[i] -= 1
                factor *= lowered[j]
                lowered[j] -= 1
                if factor and min(lowered) >= 0:
                    out[:, i, j] += c * factor * self._monomial(X, lowered)
        return out


def random_polynomial(n, degree, seed=0, name='random'):
    """Dense random polynomial of total degree <= degree."""
    rng = seeded_generator(seed, n, degree)
    terms = {}
    for exps in itertools.product(range(degree + 1), repeat=n):
        if sum(exps) <= degree:
            terms[exps] = rng.uniform(-1.0, 1.0)
    return PolynomialField(terms, n, name=name)


def gain_field(gain, t, n):
    """The reduced gain at a fixed time as a ScalarField on R^n."""
    return ScalarField(
        lambda X: gain.value(t, X),
        lambda X: gain.gradient(t, X),
        lambda X: gain.hessian(t, X),
        name='gain@{}'.format(t))


def friedrichs_gradient(f, x, h=None):
    """Central-difference derivatives of f along each basis direction."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if h is None:
        h = 1e-5 * (1.0 + np.linalg.norm(x))
    if not h > 0:
        raise NumericError("step h must be positive")

    shifts = np.eye(n) * h
    points = np.concatenate([x + shifts, x - shifts], axis=0)
    values = np.asarray(f(points), dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericError("non-finite field value", coordinate=int(bad[0] % n) + 1)
    return (values[:n] - values[n:]) / (2.0 * h)


def gradient_order(f, grad, x, h0=0.1, levels=5):
    """
    Observed convergence order of friedrichs_gradient against a closed form
    on a halving-h sequence. Exact agreement is reported separately since
    piecewise-linear gains have no truncation error away from their kinks.
    """
    x = np.asarray(x, dtype=float).ravel()
    exact = np.asarray(grad(x[None, :]), dtype=float)[0]
    steps = h0 / 2.0 ** np.arange(levels)
    errors = np.array([
        np.linalg.norm(friedrichs_gradient(f, x, h) - exact) for h in steps])
    scale = 1.0 + np.linalg.norm(exact)
    if np.all(errors <= 1e-9 * scale):
        return {'errors': errors, 'order': float('inf'), 'exact': True}
    usable = errors > 1e-12 * scale
    slope = np.polyfit(np.log(steps[usable]), np.log(errors[usable]), 1)[0]
    return {'errors': errors, 'order': float(slope), 'exact': False}


def lp_norm(f, p, mu, method=None, nodes=None, samples=DEFAULT_SAMPLES, seed=0, name='f'):
    """(integral |f|^p dmu)^(1/p) as a NormReport."""
    if not p >= 1:
        raise ExponentError("L^p norms need p >= 1 (got {})".format(p))
    method = method or default_method(mu)

    def integrand(X):
        return np.abs(np.asarray(f(X), dtype=float)) ** p

    mean, stderr, count = mu.expect(integrand, method, nodes, samples, seed)
    value = mean ** (1.0 / p)
    if stderr and mean > 0:
        stderr = stderr * mean ** (1.0 / p - 1.0) / p
    return NormReport(name, p, method, count, value, stderr=stderr)


def vpn_norm(f, grad_f, p, mu, method=None, nodes=None, samples=DEFAULT_SAMPLES, seed=0, name='f'):
    """||f||_{L^{2p}} + ||Df||_{L^{2p'}} with p' the conjugate exponent."""
    if not p > 1:
        raise ExponentError("the V^p_n norm needs p > 1 (conjugate exponent undefined at p={})".format(p))
    p_conj = p / (p - 1.0)
    method = method or default_method(mu)

    value_part = lp_norm(f, 2.0 * p, mu, method, nodes, samples, seed, name)

    def grad_norm(X):
        return np.linalg.norm(np.atleast_2d(grad_f(X)), axis=1)

    grad_part = lp_norm(grad_norm, 2.0 * p_conj, mu, method, nodes, samples, seed, name)
    utils.debug("V^p_n norm of {}: {} + {}".format(name, value_part.value, grad_part.value))
    return NormReport(
        name, p, method, value_part.count, value_part.value,
        value_grad=grad_part.value, stderr=value_part.stderr + grad_part.stderr,
        exponent_lp=2.0 * p, exponent_grad=2.0 * p_conj)


def measure_normalization(mu, method=None, nodes=None, samples=DEFAULT_SAMPLES, seed=0):
    method = method or default_method(mu)
    mean, stderr, _ = mu.expect(lambda X: np.ones(X.shape[0]), method, nodes, samples, seed)
    return mean, stderr


def gain_bound_check(gain, n, samples=10000, seed=0, tol=0.01, spread=3.0, delta=1e-4):
    """
    Sampled check of 0 <= Theta <= Theta_bar and of the finite-difference
    slopes against the declared Lipschitz constants.
    """
    rng = seeded_generator(seed, n, 0xB0)
    t = rng.uniform(0.0, gain.horizon - delta, samples)
    X = rng.standard_normal((samples, n)) * spread

    values = gain.value(t, X)
    directions = rng.standard_normal((samples, n))
    directions /= np.linalg.norm(directions, axis=1)[:, None]

    slope_x = np.abs(gain.value(t, X + delta * directions) - values) / delta
    slope_t = np.abs(gain.value(t + delta, X) - values) / delta

    return {
        'min_value': float(values.min()),
        'max_value': float(values.max()),
        'theta_bar': gain.theta_bar,
        'max_slope_x': float(slope_x.max()),
        'lip_x': gain.lip_x,
        'max_slope_t': float(slope_t.max()),
        'lip_t': gain.lip_t,
        'passed': bool(values.min() >= 0.0 and values.max() <= gain.theta_bar and
                       slope_x.max() <= gain.lip_x * (1.0 + tol) + 1e-12 and
                       slope_t.max() <= gain.lip_t * (1.0 + tol) + 1e-12),
    }
