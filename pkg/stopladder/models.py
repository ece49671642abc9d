import math

import numpy as np

from .errors import DimensionError, ValidationError


def _frozen(values, dtype=float):
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


def _padded(values, d):
    """First d entries of values, zero-padded when d exceeds its length."""
    out = np.zeros(d)
    k = min(d, len(values))
    out[:k] = values[:k]
    return out


class CovarianceSpec(object):
    """Diagonal covariance Q on the master truncation: Q phi_i = lambda_i phi_i."""

    def __init__(self, lambdas, n_master=None, ordered=True):
        lambdas = np.asarray(lambdas, dtype=float).ravel()
        if lambdas.size == 0:
            raise ValidationError('covariance.lambdas', 'at least one eigenvalue is required')
        if not np.all(np.isfinite(lambdas)) or np.any(lambdas <= 0):
            raise ValidationError('covariance.lambdas', 'all eigenvalues must be positive and finite')
        if ordered and np.any(np.diff(lambdas) > 0):
            raise ValidationError('covariance.lambdas', 'eigenvalues must be non-increasing')
        if n_master is None:
            n_master = lambdas.size
        if n_master != lambdas.size:
            raise ValidationError('covariance.n_master', 'must equal the number of eigenvalues')

        self.lambdas = _frozen(lambdas)
        self.n_master = int(n_master)

    def partial_trace(self, n=None):
        if n is None:
            n = self.n_master
        self.check_dimension(n)
        return math.fsum(self.lambdas[:n])

    @property
    def trace(self):
        return self.partial_trace(self.n_master)

    def check_dimension(self, n):
        if not 1 <= n <= self.n_master:
            raise DimensionError(
                "dimension {} outside 1..{}".format(n, self.n_master))

    def to_object(self):
        return {
            'lambdas': self.lambdas.tolist(),
            'n_master': self.n_master,
            'trace': self.trace,
        }


class OperatorSpec(object):
    """The drift operator A written in the master basis (units 1/time)."""

    def __init__(self, kind, entries):
        if kind not in ('diagonal', 'dense'):
            raise ValidationError('operator.kind', "must be 'diagonal' or 'dense'")
        entries = np.asarray(entries, dtype=float)
        if kind == 'diagonal':
            entries = entries.ravel()
        elif entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ValidationError('operator.entries', 'dense operator needs a square matrix')
        if not np.all(np.isfinite(entries)):
            raise ValidationError('operator.entries', 'entries must be finite')

        self.kind = kind
        self.entries = _frozen(entries)

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def is_diagonal(self):
        return self.kind == 'diagonal'

    @property
    def matrix(self):
        if self.is_diagonal:
            return np.diag(self.entries)
        return np.array(self.entries)

    def spectral_gap(self):
        """m with a_i <= -m for a diagonal operator (negative when violated)."""
        if not self.is_diagonal:
            return None
        return float(-np.max(self.entries))

    def to_object(self):
        return {'kind': self.kind, 'entries': self.entries.tolist()}


class DiffusionSpec(object):
    """
    gamma: H -> H with sigma(x) = Q gamma(x).

    'constant'  : gamma(x) = g0
    'saturated' : gamma_i(x) = g0_i + g1_i * s * tanh(x_i / s), bounded with
                  derivative bounded by |g1_i|
    """

    def __init__(self, kind, gamma, slope=None, scale=1.0):
        if kind not in ('constant', 'saturated'):
            raise ValidationError('diffusion.kind', "must be 'constant' or 'saturated'")
        if scale <= 0:
            raise ValidationError('diffusion.scale', 'must be positive')

        self.kind = kind
        self.gamma = _frozen(np.ravel(gamma))
        if slope is None:
            slope = np.zeros_like(self.gamma)
        self.slope = _frozen(np.ravel(slope))
        if kind == 'constant' and np.any(self.slope != 0):
            raise ValidationError('diffusion.slope', "a constant diffusion has no slope")
        self.scale = float(scale)

    def gamma_values(self, X):
        X = np.atleast_2d(X)
        d = X.shape[1]
        g0 = _padded(self.gamma, d)
        if self.kind == 'constant':
            return np.broadcast_to(g0, X.shape).copy()
        g1 = _padded(self.slope, d)
        return g0 + g1 * self.scale * np.tanh(X / self.scale)

    def gamma_derivative(self, X):
        """Diagonal of D gamma (the family acts coordinatewise)."""
        X = np.atleast_2d(X)
        d = X.shape[1]
        if self.kind == 'constant':
            return np.zeros(X.shape)
        g1 = _padded(self.slope, d)
        return g1 / np.cosh(X / self.scale) ** 2

    def sigma(self, X, cov):
        X = np.atleast_2d(X)
        return cov.lambdas[:X.shape[1]] * self.gamma_values(X)

    def sigma_derivative(self, X, cov):
        X = np.atleast_2d(X)
        return cov.lambdas[:X.shape[1]] * self.gamma_derivative(X)

    @property
    def gamma_bound(self):
        return float(np.linalg.norm(np.abs(self.gamma) + np.abs(_padded(self.slope, len(self.gamma))) * self.scale))

    @property
    def derivative_bound(self):
        if self.slope.size == 0:
            return 0.0
        return float(np.max(np.abs(self.slope)))

    @property
    def is_zero(self):
        return not np.any(self.gamma) and not np.any(self.slope)

    def to_object(self):
        return {
            'kind': self.kind,
            'gamma': self.gamma.tolist(),
            'slope': self.slope.tolist(),
            'scale': self.scale,
        }


class TimeFactor(object):
    """Separable time factor h(t) of a gain."""

    def __init__(self, kind='one', h0=1.0, h1=0.0, rate=0.0):
        if kind not in ('one', 'affine', 'discount'):
            raise ValidationError('gain.time_factor.kind', "must be 'one', 'affine' or 'discount'")
        self.kind = kind
        self.h0 = float(h0)
        self.h1 = float(h1)
        self.rate = float(rate)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == 'one':
            return np.ones_like(t)
        if self.kind == 'affine':
            return self.h0 + self.h1 * t
        return np.exp(-self.rate * t)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == 'one':
            return np.zeros_like(t)
        if self.kind == 'affine':
            return np.full_like(t, self.h1)
        return -self.rate * np.exp(-self.rate * t)

    def extremes(self, horizon):
        # Every family is monotone, so the endpoints bound it.
        ends = self(np.array([0.0, horizon]))
        return float(ends.min()), float(ends.max())

    def derivative_bound(self, horizon):
        ends = np.abs(self.derivative(np.array([0.0, horizon])))
        return float(ends.max())

    def to_object(self):
        return {'kind': self.kind, 'h0': self.h0, 'h1': self.h1, 'rate': self.rate}


class GainSpec(object):
    """
    Parametric gain Theta(t, x) = h(t) * g(<ell, x>).

    'put'      : g(y) = min(cap, max(strike - y, 0))
    'call'     : g(y) = min(cap, max(y - strike, 0))
    'constant' : g(y) = level

    The capped families are Lipschitz with second derivative zero away from
    the two kinks, which is what the closed-form derivatives report.
    """

    families = ('put', 'call', 'constant')

    def __init__(self, family, horizon, ell=None, strike=0.0, cap=None,
                 level=1.0, time_factor=None, declared=None):
        if family not in self.families:
            raise ValidationError('gain.family', "must be one of {}".format(', '.join(self.families)))
        if not horizon > 0:
            raise ValidationError('gain.horizon', 'must be positive')

        self.family = family
        self.horizon = float(horizon)
        self.ell = _frozen([] if ell is None else np.ravel(ell))
        self.strike = float(strike)
        self.cap = None if cap is None else float(cap)
        self.level = float(level)
        self.time_factor = time_factor or TimeFactor()

        if family in ('put', 'call'):
            if self.cap is None or not self.cap > 0:
                raise ValidationError('gain.cap', 'capped gains need a positive cap')
            if self.ell.size == 0:
                raise ValidationError('gain.ell', 'linear gains need a direction ell')
        elif self.level < 0:
            raise ValidationError('gain.level', 'must be non-negative')

        h_min, _ = self.time_factor.extremes(self.horizon)
        if h_min < 0:
            raise ValidationError('gain.time_factor', 'h(t) must stay non-negative on [0, T]')

        self.declared = dict(declared or {})
        derived = self.derived_bounds()
        for key, value in self.declared.items():
            if key not in derived:
                raise ValidationError('gain.bounds.{}'.format(key), 'unknown bound')
            if value < derived[key]:
                raise ValidationError(
                    'gain.bounds.{}'.format(key),
                    'declared {} is below the family bound {}'.format(value, derived[key]))

    def _project(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ _padded(self.ell, X.shape[1])

    def _g(self, y):
        if self.family == 'put':
            return np.clip(self.strike - y, 0.0, self.cap)
        if self.family == 'call':
            return np.clip(y - self.strike, 0.0, self.cap)
        return np.full_like(y, self.level)

    def _g_prime(self, y):
        if self.family == 'put':
            z = self.strike - y
            return np.where((z > 0) & (z < self.cap), -1.0, 0.0)
        if self.family == 'call':
            z = y - self.strike
            return np.where((z > 0) & (z < self.cap), 1.0, 0.0)
        return np.zeros_like(y)

    def value(self, t, X):
        y = self._project(X)
        return self.time_factor(t) * self._g(y)

    def time_derivative(self, t, X):
        y = self._project(X)
        return self.time_factor.derivative(t) * self._g(y)

    def gradient(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = self._project(X)
        scale = np.asarray(self.time_factor(t) * self._g_prime(y))
        return scale[..., None] * _padded(self.ell, X.shape[1])

    def hessian(self, t, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.zeros((X.shape[0], X.shape[1], X.shape[1]))

    def sup_g(self):
        if self.family == 'constant':
            return self.level
        return self.cap

    def derived_bounds(self):
        _, h_max = self.time_factor.extremes(self.horizon)
        lip = 0.0 if self.family == 'constant' else float(np.linalg.norm(self.ell))
        return {
            'theta_bar': h_max * self.sup_g(),
            'lip_x': h_max * lip,
            'lip_t': self.time_factor.derivative_bound(self.horizon) * self.sup_g(),
            'hess': 0.0,
        }

    def _bound(self, key):
        return self.declared.get(key, self.derived_bounds()[key])

    @property
    def theta_bar(self):
        return self._bound('theta_bar')

    @property
    def lip_x(self):
        return self._bound('lip_x')

    @property
    def lip_t(self):
        return self._bound('lip_t')

    @property
    def hess_bound(self):
        return self._bound('hess')

    @property
    def support(self):
        """Number of leading coordinates the gain depends on."""
        nonzero = np.flatnonzero(self.ell)
        return 0 if nonzero.size == 0 else int(nonzero[-1]) + 1

    def to_object(self):
        return {
            'family': self.family,
            'horizon': self.horizon,
            'ell': self.ell.tolist(),
            'strike': self.strike,
            'cap': self.cap,
            'level': self.level,
            'time_factor': self.time_factor.to_object(),
            'bounds': self.derived_bounds(),
            'declared': dict(self.declared),
        }


class ProblemSpec(object):
    """The infinite-dimensional problem held at its master truncation."""

    def __init__(self, operator, covariance, diffusion, gain, schedule=None):
        if operator.size != covariance.n_master:
            raise ValidationError(
                'operator.entries',
                'operator size {} does not match the {} covariance eigenvalues'.format(
                    operator.size, covariance.n_master))
        for key, values in (('diffusion.gamma', diffusion.gamma),
                            ('diffusion.slope', diffusion.slope),
                            ('gain.ell', gain.ell)):
            if len(values) > covariance.n_master:
                raise ValidationError(key, 'longer than the master truncation')

        self.operator = operator
        self.covariance = covariance
        self.diffusion = diffusion
        self.gain = gain
        self.schedule = dict(schedule or {'rule': 'inverse', 'scale': 1.0})

    @property
    def horizon(self):
        return self.gain.horizon

    @property
    def n_master(self):
        return self.covariance.n_master

    def to_object(self):
        return {
            'operator': self.operator.to_object(),
            'covariance': self.covariance.to_object(),
            'diffusion': self.diffusion.to_object(),
            'gain': self.gain.to_object(),
            'schedule': dict(self.schedule),
        }


NORM_HEADERS = ['name', 'p', 'method', 'value', 'stderr']


class NormReport(object):

    def __init__(self, name, p, method, count, value_lp, value_grad=None,
                 stderr=0.0, exponent_lp=None, exponent_grad=None):
        self.name = name
        self.p = p
        self.method = method
        self.count = count
        self.value_lp = value_lp
        self.value_grad = value_grad
        self.stderr = stderr
        self.exponent_lp = p if exponent_lp is None else exponent_lp
        self.exponent_grad = exponent_grad

    @property
    def value_vpn(self):
        if self.value_grad is None:
            return None
        return self.value_lp + self.value_grad

    @property
    def value(self):
        if self.value_grad is None:
            return self.value_lp
        return self.value_vpn

    def to_row(self):
        return {
            'name': self.name,
            'p': self.p,
            'method': '{}:{}'.format(self.method, self.count),
            'value': self.value,
            'stderr': self.stderr,
        }

    def to_object(self):
        return {
            'name': self.name,
            'p': self.p,
            'method': self.method,
            'count': self.count,
            'value_lp': self.value_lp,
            'value_grad': self.value_grad,
            'value_vpn': self.value_vpn,
            'stderr': self.stderr,
        }


CONVERGENCE_HEADERS = ['rung', 'param', 'error_mean', 'error_stderr', 'paths', 'steps', 'seed']


class ConvergenceReport(object):
    """Error-versus-parameter rows of a coupled ladder study."""

    def __init__(self, rung, rows):
        self.rung = rung
        self.rows = list(rows)

    @property
    def params(self):
        return [row['param'] for row in self.rows]

    @property
    def errors(self):
        return np.array([row['error_mean'] for row in self.rows])

    def is_decreasing(self, strict=True):
        diffs = np.diff(self.errors)
        if strict:
            return bool(np.all(diffs < 0))
        return bool(np.all(diffs <= 0))

    def to_rows(self):
        return [dict(row, rung=self.rung) for row in self.rows]
