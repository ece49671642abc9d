"""
Operator algebra of the approximation ladder: Yosida approximations and
their projections, generator coefficients, forcing, the Gauss-weighted
bilinear form and trace diagnostics.
"""

import math

import numpy as np

from . import utils
from .errors import DimensionError, ResolventError, ValidationError
from .measures import default_method, vpn_norm
from .models import GainSpec

# Condition number above which (alpha*I - A) is treated as singular.
RESOLVENT_COND_LIMIT = 1e12

# Tail ratio above which a trace partial sum is flagged as not settling.
TRACE_TAIL_THRESHOLD = 0.1

TRACE_HEADERS = ['level', 'trQ_partial', 'trAQA_partial', 'tail_ratio', 'assumption_flag']


class YosidaMatrix(object):
    """A_{alpha,n} = P_n A_alpha P_n as an n x n matrix (alpha = inf gives P_n A P_n)."""

    def __init__(self, alpha, matrix, source, tail=0.0):
        self.alpha = alpha
        self.matrix = np.array(matrix, dtype=float)
        self.matrix.setflags(write=False)
        self.source = source
        self.tail = tail

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def is_diagonal(self):
        return self.source.is_diagonal

    @property
    def diagonal(self):
        return np.diag(self.matrix).copy()

    def apply(self, X):
        return np.atleast_2d(X) @ self.matrix.T

    def norm(self):
        return float(np.linalg.norm(self.matrix, 2))

    def to_object(self):
        return {
            'alpha': self.alpha,
            'n': self.n,
            'matrix': self.matrix.tolist(),
            'tail': self.tail,
        }


def yosida(op, alpha, n):
    if not alpha > 0:
        raise ValidationError('ladder.alpha', 'Yosida parameter must be positive')
    if not 1 <= n <= op.size:
        raise DimensionError("dimension {} outside 1..{}".format(n, op.size))

    if op.is_diagonal:
        a = np.array(op.entries[:n])
        if math.isinf(alpha):
            return YosidaMatrix(alpha, np.diag(a), op)
        gap = alpha - a
        if np.any(np.abs(gap) <= alpha / RESOLVENT_COND_LIMIT):
            raise ResolventError(alpha, float('inf'))
        return YosidaMatrix(alpha, np.diag(alpha * a / gap), op)

    A = op.matrix
    if math.isinf(alpha):
        full = A
    else:
        resolvent = alpha * np.eye(op.size) - A
        condition = np.linalg.cond(resolvent)
        if not np.isfinite(condition) or condition > RESOLVENT_COND_LIMIT:
            raise ResolventError(alpha, condition)
        # A commutes with its resolvent, so alpha*(alpha*I - A)^{-1} A = alpha*A*(alpha*I - A)^{-1}.
        full = alpha * np.linalg.solve(resolvent, A)

    tail = math.hypot(np.linalg.norm(full[:n, n:]), np.linalg.norm(full[n:, :n]))
    utils.debug("Yosida alpha={} n={}: projection tail {:.3e}".format(alpha, n, tail))
    return YosidaMatrix(alpha, full[:n, :n], op, tail=tail)


def embed(X, n_master):
    """Zero-extend points of R^n to the master truncation."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] > n_master:
        raise DimensionError("points of dimension {} exceed N_master={}".format(X.shape[1], n_master))
    out = np.zeros((X.shape[0], n_master))
    out[:, :X.shape[1]] = X
    return out


class ReducedGain(object):
    """Theta^(n)(t, x) = Theta(t, P_n x) on R^n."""

    def __init__(self, gain, n, n_master):
        if not 1 <= n <= n_master:
            raise DimensionError("dimension {} outside 1..{}".format(n, n_master))
        self.gain = gain
        self.n = n
        self.n_master = n_master

    def value(self, t, X):
        return self.gain.value(t, embed(X, self.n_master))

    def time_derivative(self, t, X):
        return self.gain.time_derivative(t, embed(X, self.n_master))

    def gradient(self, t, X):
        return self.gain.gradient(t, embed(X, self.n_master))[:, :self.n]

    def hessian(self, t, X):
        return self.gain.hessian(t, embed(X, self.n_master))[:, :self.n, :self.n]

    @property
    def horizon(self):
        return self.gain.horizon

    @property
    def theta_bar(self):
        return self.gain.theta_bar

    @property
    def lip_x(self):
        return self.gain.lip_x

    @property
    def lip_t(self):
        return self.gain.lip_t

    @property
    def hess_bound(self):
        return self.gain.hess_bound


def project_gain(gain, n, n_master=None):
    if isinstance(gain, ReducedGain):
        gain = gain.gain
    if n_master is None:
        n_master = max(n, len(gain.ell))
    return ReducedGain(gain, n, n_master)


class GeneratorCoefficients(object):
    """
    Coefficients of L_{alpha,n} u = 1/2 Tr[B D^2 u] + <A_{alpha,n} x, D u>:
    B = sigma sigma* + eps^2 I and the Gauss-weighted drift Cbar.

    With noise='q_wiener' the diffusion is B = Q_n instead, the symmetric
    Ornstein-Uhlenbeck setting.
    """

    def __init__(self, drift, diffusion, cov, epsilon_n, noise='cylindrical'):
        if epsilon_n < 0:
            raise ValidationError('problem.schedule', 'epsilon_n must be non-negative')
        if noise not in ('cylindrical', 'q_wiener'):
            raise ValidationError('model.noise', "must be 'cylindrical' or 'q_wiener'")
        self.drift = drift
        self.diffusion = diffusion
        self.cov = cov
        self.epsilon_n = float(epsilon_n)
        self.noise = noise

    @property
    def n(self):
        return self.drift.n

    @property
    def lambdas(self):
        return self.cov.lambdas[:self.n]

    def sigma(self, X):
        return self.diffusion.sigma(np.atleast_2d(X), self.cov)

    def B(self, X):
        X = np.atleast_2d(X)
        if self.noise == 'q_wiener':
            return np.broadcast_to(np.diag(self.lambdas), (X.shape[0], self.n, self.n)).copy()
        s = self.sigma(X)
        return s[:, :, None] * s[:, None, :] + self.epsilon_n ** 2 * np.eye(self.n)

    def drift_field(self, X):
        return self.drift.apply(X)

    def divergence(self, X):
        """(sum_j d/dx_j B_ij)_i for the coordinatewise sigma families."""
        X = np.atleast_2d(X)
        if self.noise == 'q_wiener':
            return np.zeros_like(X, dtype=float)
        s = self.sigma(X)
        ds = self.diffusion.sigma_derivative(X, self.cov)
        return ds * s + ds.sum(axis=1, keepdims=True) * s

    def cbar(self, X):
        X = np.atleast_2d(X)
        q_inv_x = X / self.lambdas
        return 0.5 * (self.divergence(X)
                      - 2.0 * self.drift_field(X)
                      - np.einsum('mij,mj->mi', self.B(X), q_inv_x))

    def min_eigenvalue(self, X):
        return np.linalg.eigvalsh(self.B(X)).min(axis=1)

    def noise_rank(self, X, tol=1e-12):
        if self.noise == 'q_wiener':
            return np.full(np.atleast_2d(X).shape[0], self.n)
        s = self.sigma(X)
        return (np.linalg.norm(s, axis=1) > tol).astype(int)


def generator_coeffs(op, diff, cov, epsilon_n, noise='cylindrical'):
    return GeneratorCoefficients(op, diff, cov, epsilon_n, noise)


def generator_apply(coeffs, field, X):
    """L_{alpha,n} applied to a field with closed-form Hessian."""
    X = np.atleast_2d(X)
    second = 0.5 * np.einsum('mij,mij->m', coeffs.B(X), field.hess(X))
    first = np.sum(coeffs.drift_field(X) * field.grad(X), axis=1)
    return second + first


class ForcingField(object):
    """f_{alpha,n} = dTheta/dt + L_{alpha,n} Theta from the gain's closed forms."""

    def __init__(self, gain, coeffs):
        self.gain = gain
        self.coeffs = coeffs

    def __call__(self, t, X):
        X = np.atleast_2d(X)
        B = self.coeffs.B(X)
        second = 0.5 * np.einsum('mij,mij->m', B, self.gain.hessian(t, X))
        first = np.sum(self.coeffs.drift_field(X) * self.gain.gradient(t, X), axis=1)
        return self.gain.time_derivative(t, X) + second + first

    def bound(self, t, X):
        X = np.atleast_2d(X)
        trace_b = np.trace(self.coeffs.B(X), axis1=1, axis2=2)
        drift = np.linalg.norm(self.coeffs.drift_field(X), axis=1)
        return self.gain.lip_t + 0.5 * trace_b * self.gain.hess_bound + drift * self.gain.lip_x


def forcing(gain, coeffs, op=None):
    if op is not None and op is not coeffs.drift:
        coeffs = GeneratorCoefficients(op, coeffs.diffusion, coeffs.cov, coeffs.epsilon_n, coeffs.noise)
    if isinstance(gain, GainSpec):
        gain = project_gain(gain, coeffs.n, coeffs.cov.n_master)
    return ForcingField(gain, coeffs)


def bilinear_form(coeffs, u, w, mu, method=None, nodes=None, samples=200000, seed=0):
    """a(u, w) = int 1/2 <B Du, Dw> dmu_n + int <Cbar, Du> w dmu_n."""
    method = method or default_method(mu)

    def integrand(X):
        du = u.grad(X)
        dw = w.grad(X)
        diffusion = 0.5 * np.einsum('mi,mij,mj->m', du, coeffs.B(X), dw)
        transport = np.sum(coeffs.cbar(X) * du, axis=1) * w.value(X)
        return diffusion + transport

    value, _, _ = mu.expect(integrand, method, nodes, samples, seed)
    return value


def green_residual(coeffs, u, w, mu, method=None, nodes=None):
    """|a(u, w) + int (L u) w dmu_n|, zero up to quadrature error."""
    method = method or default_method(mu)
    form = bilinear_form(coeffs, u, w, mu, method, nodes)
    generator_side, _, _ = mu.expect(
        lambda X: generator_apply(coeffs, u, X) * w.value(X), method, nodes)
    return abs(form + generator_side)


def continuity_ratios(coeffs, pairs, mu, p, nodes=None):
    ratios = []
    for u, w in pairs:
        form = bilinear_form(coeffs, u, w, mu, nodes=nodes)
        nu = vpn_norm(u.value, u.grad, p, mu, nodes=nodes).value
        nw = vpn_norm(w.value, w.grad, p, mu, nodes=nodes).value
        ratios.append(abs(form) / (nu * nw) if nu * nw > 0 else 0.0)
    return np.array(ratios)


def continuity_check(coeffs, calibration, suite, mu, p, margin=2.0, nodes=None):
    """
    Fit C once on the calibration pairs, then require |a(u,w)| <= C |||u||| |||w|||
    on every pair of the suite.
    """
    fitted = margin * float(continuity_ratios(coeffs, calibration, mu, p, nodes).max())
    observed = continuity_ratios(coeffs, suite, mu, p, nodes)
    return {
        'constant': fitted,
        'max_ratio': float(observed.max()),
        'passed': bool(np.all(observed <= fitted)),
    }


def trace_diagnostics(op, cov, threshold=TRACE_TAIL_THRESHOLD):
    """
    Partial sums of Tr Q and Tr[A Q A*] per truncation level with the tail
    ratio (S_k - S_{k//2}) / S_k. The flag marks levels where the second half
    of the partial sum is still a sizeable share of the total.
    """
    if op.size != cov.n_master:
        raise DimensionError("operator and covariance sizes differ")
    lambdas = cov.lambdas
    A = op.matrix
    # (A Q A*)_{ii} = sum_j A_ij^2 lambda_j
    diag_aqa = np.sum(A ** 2 * lambdas[None, :], axis=1)

    tr_q = np.cumsum(lambdas)
    tr_aqa = np.cumsum(diag_aqa)
    rows = []
    for k in range(1, cov.n_master + 1):
        total = tr_aqa[k - 1]
        half = tr_aqa[k // 2 - 1] if k // 2 >= 1 else 0.0
        ratio = (total - half) / total if total > 0 else 0.0
        rows.append({
            'level': k,
            'trQ_partial': float(tr_q[k - 1]),
            'trAQA_partial': float(total),
            'tail_ratio': float(ratio),
            'assumption_flag': bool(k >= 4 and ratio > threshold),
        })
    return rows
