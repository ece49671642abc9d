"""
Finite-difference solvers for the arrested obstacle problem on [0,T] x O_R

    max{ du/dt + L u + f, -u } = 0,   u(T) = 0,   u = 0 off the open ball,

with U = u + Theta the value function. The generator is assembled in
Lebesgue form over the bounding box of the ball; the Gaussian measure only
enters through norms.
"""

import concurrent.futures
import logging
import math
import struct

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve

from . import utils
from .errors import (
    ConsistencyError, DimensionError, SolverError, StabilityError, ValidationError)
from .measures import GaussianMeasure
from .models import NormReport

# Default tolerances. Solver tolerances sit well below the assertion tolerance.
NEWTON_TOL = 1e-10
PSOR_TOL = 1e-10
NUM_TOL = 1e-8

PSOR_OMEGA = 1.5
PSOR_MAX_ITER = 10000
NEWTON_MAX_ITER = 50

# Grid solves are limited to n <= 3.
MAX_GRID_DIM = 3

# Central differences are kept up to this cell Peclet number |b| h / D.
PECLET_LIMIT = 2.0

FIELD_MAGIC = b'SLVF'
FIELD_VERSION = 1

PROBE_HEADERS_TAIL = ['u', 'U', 'theta']
SWEEP_HEADERS = ['epsilon', 'negative_part', 'distance_to_psor', 'newton_iterations']


class DomainSpec(object):
    """
    Uniform grid over the box [-R, R]^n; interior nodes are those with
    |x| < R. Every interior node has its full 3^n stencil inside the box.
    """

    def __init__(self, R, nodes, n=None):
        nodes = [int(k) for k in np.atleast_1d(nodes)]
        if n is None:
            n = len(nodes)
        if len(nodes) == 1 and n > 1:
            nodes = nodes * n
        if len(nodes) != n:
            raise ValidationError('grid.nodes', 'one node count per axis is required')
        if not 1 <= n <= MAX_GRID_DIM:
            raise DimensionError("grid solves need 1 <= n <= {} (got n={})".format(MAX_GRID_DIM, n))
        if not R > 0:
            raise ValidationError('grid.radius', 'must be positive')
        if min(nodes) < 3:
            raise ValidationError('grid.nodes', 'at least 3 nodes per axis')

        self.R = float(R)
        self.n = n
        self.counts = tuple(nodes)
        self.axes = [np.linspace(-self.R, self.R, k) for k in nodes]
        self.spacing = np.array([2.0 * self.R / (k - 1) for k in nodes])

        grids = np.meshgrid(*self.axes, indexing='ij')
        self.points = np.stack([g.ravel() for g in grids], axis=1)
        radius = np.linalg.norm(self.points, axis=1)
        self.mask = (radius < self.R * (1.0 - 1e-12)).reshape(self.counts)
        self.interior = np.flatnonzero(self.mask.ravel())
        if self.interior.size == 0:
            raise ValidationError('grid.nodes', 'grid has no interior node')

    @property
    def shape(self):
        return self.counts

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def contains(self, X):
        return np.linalg.norm(np.atleast_2d(X), axis=1) < self.R

    def with_radius(self, R):
        """A grid over a different ball with the same spacing."""
        nodes = [int(round(2.0 * R / h)) + 1 for h in self.spacing]
        return DomainSpec(R, nodes, self.n)

    def to_object(self):
        return {
            'R': self.R,
            'n': self.n,
            'counts': list(self.counts),
            'spacing': self.spacing.tolist(),
            'interior': int(self.interior.size),
        }


class PenaltyParams(object):

    def __init__(self, epsilon, time_steps, theta=1.0, newton_tol=NEWTON_TOL,
                 max_iter=NEWTON_MAX_ITER, explicit=False, forcing_mode='discrete'):
        if epsilon is None or not epsilon > 0:
            raise ValidationError('penalty.epsilon', 'must be positive')
        if not explicit and not 0.5 <= theta <= 1.0:
            raise ValidationError('penalty.theta', 'time weight must lie in [1/2, 1]')
        if time_steps < 1:
            raise ValidationError('penalty.time_steps', 'must be >= 1')
        if forcing_mode not in ('discrete', 'closed_form'):
            raise ValidationError('penalty.forcing', "must be 'discrete' or 'closed_form'")

        self.epsilon = float(epsilon)
        self.time_steps = int(time_steps)
        self.theta = 0.0 if explicit else float(theta)
        self.newton_tol = newton_tol
        self.max_iter = max_iter
        self.explicit = explicit
        self.forcing_mode = forcing_mode

    def to_object(self):
        return {
            'epsilon': self.epsilon,
            'time_steps': self.time_steps,
            'theta': self.theta,
            'newton_tol': self.newton_tol,
            'max_iter': self.max_iter,
            'explicit': self.explicit,
            'forcing_mode': self.forcing_mode,
        }


class ValueField(object):
    """
    u and U = u + Theta on the (time x grid) lattice.

    lower_tol is the tolerance for u >= -lower_tol: the penalized solution
    undershoots zero by about epsilon * |f^-|.
    """

    def __init__(self, times, u, gain, dom, meta, lower_tol=NUM_TOL, forcing=None):
        self.times = np.asarray(times, dtype=float)
        self.u = u
        self.gain = gain
        self.U = u + gain
        self.dom = dom
        self.meta = dict(meta)
        self.lower_tol = float(lower_tol)
        self.forcing = forcing
        self._interpolators = {}

    @property
    def steps(self):
        return len(self.times) - 1

    @property
    def dt(self):
        return self.times[1] - self.times[0]

    @property
    def horizon(self):
        return float(self.times[-1])

    def grid(self, which='U', k=0):
        return getattr(self, which)[k].reshape(self.dom.shape)

    def interpolator(self, k, which='u'):
        key = (k, which)
        if key not in self._interpolators:
            self._interpolators[key] = RegularGridInterpolator(
                self.dom.axes, self.grid(which, k), bounds_error=False, fill_value=0.0)
        return self._interpolators[key]

    def probe(self, points, k=0, which='U'):
        points = np.atleast_2d(np.asarray(points, dtype=float))[:, :self.dom.n]
        return self.interpolator(k, which)(points)

    def to_object(self):
        return {
            'meta': self.meta,
            'domain': self.dom.to_object(),
            'steps': self.steps,
            'horizon': self.horizon,
            'lower_tol': self.lower_tol,
        }


def _neighbours(index, offset, shape):
    return np.ravel_multi_index(tuple((index + offset).T), shape)


def assemble_generator(coeffs, dom):
    """
    Sparse L_h with one row per interior node and one column per box node.

    Second derivatives use central differences, including the four-point
    mixed stencil; the drift is central unless the cell Peclet number
    exceeds PECLET_LIMIT, in which case it is upwinded.
    """
    if coeffs.n != dom.n:
        raise DimensionError("generator dimension {} does not match the grid ({})".format(coeffs.n, dom.n))
    n = dom.n
    interior = dom.interior
    X = dom.points[interior]
    index = np.stack(np.unravel_index(interior, dom.shape), axis=1)
    B = coeffs.B(X)
    b = coeffs.drift_field(X)
    m = interior.size
    row_ids = np.arange(m)

    if np.min(np.linalg.eigvalsh(B)) <= 0:
        logging.warning("Diffusion matrix B is not uniformly elliptic on the grid.")

    rows, cols, vals = [], [], []

    def add(offset, values):
        rows.append(row_ids)
        cols.append(_neighbours(index, offset, dom.shape))
        vals.append(values)

    unit = np.eye(n, dtype=int)
    for i in range(n):
        h = dom.spacing[i]
        diffusion = 0.5 * B[:, i, i]
        drift = b[:, i]
        with np.errstate(divide='ignore', invalid='ignore'):
            peclet = np.where(drift == 0, 0.0, np.abs(drift) * h / diffusion)
        upwind = peclet > PECLET_LIMIT

        second = diffusion / h ** 2
        add(unit[i], second + np.where(upwind, np.maximum(drift, 0.0) / h, drift / (2.0 * h)))
        add(-unit[i], second + np.where(upwind, np.maximum(-drift, 0.0) / h, -drift / (2.0 * h)))
        add(0 * unit[i], -2.0 * second - np.where(upwind, np.abs(drift) / h, 0.0))

    for i in range(n):
        for j in range(i + 1, n):
            mixed = B[:, i, j] / (4.0 * dom.spacing[i] * dom.spacing[j])
            add(unit[i] + unit[j], mixed)
            add(unit[i] - unit[j], -mixed)
            add(-unit[i] + unit[j], -mixed)
            add(-unit[i] - unit[j], mixed)

    L = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, dom.size)).tocsr()
    utils.debug("Assembled generator: {} interior rows, {} nonzeros".format(m, L.nnz))
    return L


def gain_grid(gain, dom, times):
    return np.stack([np.asarray(gain.value(t, dom.points), dtype=float) for t in times])


def discrete_forcing(L_full, gains, interior, dt, theta):
    """
    f_h^k = (Theta^{k+1} - Theta^k)/dt + theta L_h Theta^k + (1-theta) L_h Theta^{k+1}

    on interior nodes. With this forcing U = u + Theta is exactly the
    discrete value of the arrested problem, kinks of the gain included.
    """
    applied = np.asarray((L_full @ gains.T).T)
    jump = (gains[1:, interior] - gains[:-1, interior]) / dt
    return jump + theta * applied[:-1] + (1.0 - theta) * applied[1:]


def closed_form_forcing(forcing, dom, times, theta):
    X = dom.points[dom.interior]
    values = np.stack([np.asarray(forcing(t, X), dtype=float) for t in times])
    return theta * values[:-1] + (1.0 - theta) * values[1:]


def _step_rhs(L, later, f, dt, theta):
    rhs = later + dt * f
    if theta < 1.0:
        rhs = rhs + (1.0 - theta) * dt * (L @ later)
    return rhs


def _lcp_residual(M, u, rhs, dt):
    """Nodewise max{du/dt + L u + f, -u} of one implicit step."""
    return np.maximum(-(M @ u - rhs) / dt, -u)


class _Problem(object):
    """Everything shared by one backward march: grid, generator, gains, forcing."""

    def __init__(self, coeffs, forcing, dom, time_steps, theta, forcing_mode='discrete'):
        self.dom = dom
        self.theta = theta
        self.horizon = forcing.gain.horizon
        self.times = np.linspace(0.0, self.horizon, time_steps + 1)
        self.dt = self.horizon / time_steps
        self.L_full = assemble_generator(coeffs, dom)
        self.L = self.L_full[:, dom.interior]
        self.gains = gain_grid(forcing.gain, dom, self.times)
        if forcing_mode == 'discrete':
            self.f = discrete_forcing(self.L_full, self.gains, dom.interior, self.dt, theta)
        else:
            self.f = closed_form_forcing(forcing, dom, self.times, theta)
        identity = sparse.identity(dom.interior.size, format='csr')
        self.M = (identity - theta * self.dt * self.L).tocsr()

    def rhs(self, k, later):
        return _step_rhs(self.L, later, self.f[k], self.dt, self.theta)

    def field(self, u, meta, lower_tol=NUM_TOL):
        meta = dict(meta, theta=self.theta, R=self.dom.R)
        return ValueField(self.times, u, self.gains, self.dom, meta, lower_tol, self.f)


def _newton(M, rhs, start, kappa, tol, max_iter, step):
    """Semismooth Newton for M u + kappa * min(u, 0) = rhs."""
    u = start
    active = u < 0
    residual = float('inf')
    for iteration in range(1, max_iter + 1):
        jacobian = M + sparse.diags(kappa * active.astype(float))
        u = spsolve(jacobian.tocsc(), rhs)
        residual = float(np.max(np.abs(M @ u + kappa * np.minimum(u, 0.0) - rhs)))
        updated = u < 0
        if residual < tol or np.array_equal(updated, active):
            return u, iteration, residual
        active = updated
    raise SolverError("semismooth Newton did not converge", step, residual)


def solve_penalized(coeffs, forcing, dom, pen):
    """
    Backward march of du/dt + L u + f + (1/eps)[-u]^+ = 0 from u(T) = 0.
    Each implicit step is solved by semismooth Newton; the explicit mode
    treats L explicitly and the penalty pointwise.
    """
    problem = _Problem(coeffs, forcing, dom, pen.time_steps, pen.theta, pen.forcing_mode)
    interior = dom.interior
    kappa = problem.dt / pen.epsilon

    if pen.explicit:
        rate = float(np.max(-problem.L.diagonal()))
        if problem.dt * rate > 1.0:
            raise StabilityError(
                "explicit step violates the CFL bound: dt * max|L_ii| = {:.3f} > 1".format(problem.dt * rate))

    u = np.zeros((pen.time_steps + 1, dom.size))
    iterations = 0
    for k in range(pen.time_steps - 1, -1, -1):
        later = u[k + 1, interior]
        rhs = problem.rhs(k, later)
        if pen.explicit:
            u[k, interior] = np.where(rhs >= 0, rhs, rhs / (1.0 + kappa))
            continue
        u[k, interior], count, residual = _newton(
            problem.M, rhs, later, kappa, pen.newton_tol, pen.max_iter, k)
        iterations = max(iterations, count)

    negative = float(np.max(np.maximum(-problem.f, 0.0))) if problem.f.size else 0.0
    lower_tol = NUM_TOL + 2.0 * pen.epsilon * negative
    utils.debug("Penalized solve eps={} done, at most {} Newton iterations per step".format(
        pen.epsilon, iterations))
    meta = {
        'method': 'penalized',
        'alpha': coeffs.drift.alpha,
        'n': dom.n,
        'epsilon': pen.epsilon,
        'newton_iterations': iterations,
    }
    return problem.field(u, meta, lower_tol)


def _colours(dom):
    """Per-axis parity classes: no stencil couples two nodes of one class."""
    index = np.stack(np.unravel_index(dom.interior, dom.shape), axis=1)
    code = np.sum((index % 2) * (2 ** np.arange(dom.n)), axis=1)
    return [np.flatnonzero(code == c) for c in range(2 ** dom.n) if np.any(code == c)]


def solve_psor(coeffs, forcing, dom, time_steps, omega=PSOR_OMEGA, tol=PSOR_TOL,
               max_iter=PSOR_MAX_ITER, theta=1.0, forcing_mode='discrete'):
    """
    Backward march solving the linear complementarity problem
    M u >= rhs, u >= 0, u (M u - rhs) = 0 at each step by projected SOR.
    The sweep stops once the complementarity residual is below tol.
    """
    if not 0 < omega < 2:
        raise ValidationError('psor.omega', 'relaxation weight must lie in (0, 2)')
    problem = _Problem(coeffs, forcing, dom, time_steps, theta, forcing_mode)
    interior = dom.interior
    M = problem.M
    diagonal = M.diagonal()
    colours = [(rows, M[rows], diagonal[rows]) for rows in _colours(dom)]

    u = np.zeros((time_steps + 1, dom.size))
    sweeps = 0
    for k in range(time_steps - 1, -1, -1):
        rhs = problem.rhs(k, u[k + 1, interior])
        x = np.maximum(u[k + 1, interior], 0.0)
        residual = float('inf')
        for sweep in range(1, max_iter + 1):
            for rows, block, diag in colours:
                update = x[rows] + omega * (rhs[rows] - block @ x) / diag
                x[rows] = np.maximum(update, 0.0)
            residual = float(np.max(np.abs(_lcp_residual(M, x, rhs, problem.dt))))
            if residual < tol:
                break
        else:
            raise SolverError("PSOR iteration cap exceeded", k, residual)
        sweeps = max(sweeps, sweep)
        u[k, interior] = x

    utils.debug("PSOR solve done, at most {} sweeps per step".format(sweeps))
    meta = {'method': 'psor', 'alpha': coeffs.drift.alpha, 'n': dom.n, 'epsilon': 0.0,
            'omega': omega, 'sweeps': sweeps}
    return problem.field(u, meta)


def measure_weights(dom, lambdas):
    """Gaussian density times cell volume at each interior node."""
    mu = GaussianMeasure(np.asarray(lambdas)[:dom.n])
    return mu.density(dom.points[dom.interior]) * dom.cell_volume


def _system(field, coeffs):
    dom = field.dom
    L = assemble_generator(coeffs, dom)[:, dom.interior]
    theta = field.meta.get('theta', 1.0)
    M = (sparse.identity(dom.interior.size, format='csr') - theta * field.dt * L).tocsr()
    return L, M, theta


def complementarity_residual(field, coeffs, forcing, dom=None):
    """
    |max{du/dt + L u + f, -u}| per step and interior node, with its sup and
    its L2(mu_n) norm averaged over time.
    """
    dom = dom or field.dom
    L, M, theta = _system(field, coeffs)
    f = field.forcing
    if f is None:
        f = discrete_forcing(assemble_generator(coeffs, dom), field.gain, dom.interior, field.dt, theta)
    interior = dom.interior
    residual = np.empty((field.steps, interior.size))
    for k in range(field.steps):
        rhs = _step_rhs(L, field.u[k + 1, interior], f[k], field.dt, theta)
        residual[k] = np.abs(_lcp_residual(M, field.u[k, interior], rhs, field.dt))

    weights = measure_weights(dom, coeffs.lambdas)
    l2 = math.sqrt(float(np.mean(residual ** 2 @ weights))) if residual.size else 0.0
    worst = np.unravel_index(int(np.argmax(residual)), residual.shape) if residual.size else (0, 0)
    return {
        'sup': float(residual.max()) if residual.size else 0.0,
        'l2': l2,
        'step': int(worst[0]),
        'node': int(interior[worst[1]]),
        'values': residual,
    }


def value_bounds(field, theta_bar, tol=NUM_TOL):
    """0 <= U <= Theta_bar, U >= Theta, exact terminal and boundary values."""
    boundary = np.ones(field.dom.size, dtype=bool)
    boundary[field.dom.interior] = False
    report = {
        'min_u': float(field.u.min()),
        'max_U': float(field.U.max()),
        'min_U': float(field.U.min()),
        'terminal_exact': bool(np.all(field.u[-1] == 0.0)),
        'boundary_exact': bool(np.all(field.u[:, boundary] == 0.0)),
    }
    report['passed'] = bool(
        report['min_u'] >= -field.lower_tol and
        report['max_U'] <= theta_bar + tol and
        report['min_U'] >= -field.lower_tol and
        report['terminal_exact'] and report['boundary_exact'])
    return report


def contact_nonempty(field, tol=NUM_TOL):
    """Whether U = Theta somewhere at the last time level before T."""
    if field.steps < 1:
        return False
    interior = field.dom.interior
    return bool(np.any(field.u[-2, interior] <= tol))


def _pool_map(fn, items, jobs):
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def strictly_decreasing(values):
    """Strict decrease, or identically zero (nothing left to shrink)."""
    values = np.asarray(values, dtype=float)
    return bool(np.all(values == 0) or np.all(np.diff(values) < 0))


def penalty_sweep(coeffs, forcing, dom, epsilons, time_steps, theta=1.0, psor_field=None, jobs=1):
    """
    Penalized solves over a decreasing epsilon list: the L2(mu_n) size of
    [-u_eps]^+ and the sup distance to the PSOR solution per level.
    """
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 3:
        raise ValidationError('ladder.epsilons', 'at least three penalty levels are required')
    if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
        raise ValidationError('ladder.epsilons', 'penalty levels must be strictly decreasing')

    if psor_field is None:
        psor_field = solve_psor(coeffs, forcing, dom, time_steps, theta=theta)
    weights = measure_weights(dom, coeffs.lambdas)
    interior = dom.interior

    def solve(epsilon):
        return solve_penalized(coeffs, forcing, dom, PenaltyParams(epsilon, time_steps, theta))

    fields = _pool_map(solve, epsilons, jobs)
    rows = []
    for epsilon, field in zip(epsilons, fields):
        negative = np.maximum(-field.u[:, interior], 0.0)
        rows.append({
            'epsilon': epsilon,
            'negative_part': math.sqrt(float(np.mean(negative ** 2 @ weights))),
            'distance_to_psor': float(np.max(np.abs(field.u - psor_field.u))),
            'newton_iterations': field.meta['newton_iterations'],
        })

    negative = [row['negative_part'] for row in rows]
    distance = [row['distance_to_psor'] for row in rows]
    return {
        'rows': rows,
        'decreasing': strictly_decreasing(negative) and strictly_decreasing(distance),
        'psor': psor_field,
        'fields': fields,
    }


def domain_sweep(coeffs, forcing, dom, radii, probes, time_steps, method='psor',
                 epsilon=None, jobs=1, tol=NUM_TOL):
    """
    U_R(0, probe) over increasing radii on grids of equal spacing. U_R should
    not decrease in R and, at every probe, consecutive differences should
    shrink. 'resolved' is False when even the smallest ball already
    reproduces the larger ones to tol, so the radii say nothing about
    truncation.
    """
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValidationError('ladder.radii', 'radii must be strictly increasing')
    if method not in ('psor', 'penalized'):
        raise ValidationError('domain_sweep.method', "must be 'psor' or 'penalized'")
    if method == 'penalized' and epsilon is None:
        raise ValidationError('ladder.epsilon', 'a penalized domain sweep needs a penalty level')
    probes = np.atleast_2d(np.asarray(probes, dtype=float))[:, :dom.n]
    if np.any(np.linalg.norm(probes, axis=1) >= radii[0]):
        raise ValidationError('ladder.probes', 'probes must lie inside the smallest ball')

    def solve(R):
        grid = dom.with_radius(R)
        if method == 'psor':
            return solve_psor(coeffs, forcing, grid, time_steps)
        return solve_penalized(coeffs, forcing, grid, PenaltyParams(epsilon, time_steps))

    fields = _pool_map(solve, radii, jobs)
    values = np.array([field.probe(probes, 0, 'U') for field in fields])
    # (len(radii) - 1, probes)
    steps = np.abs(np.diff(values, axis=0))
    differences = steps.max(axis=1) if len(radii) > 1 else np.array([])

    rows = []
    for R, row in zip(radii, values):
        for probe, value in zip(probes, row):
            rows.append({'R': R, 'probe': probe.tolist(), 'U': float(value)})
    return {
        'rows': rows,
        'values': values,
        'differences': differences.tolist(),
        'probe_differences': steps,
        'monotone': bool(np.all(np.diff(values, axis=0) >= -tol)),
        'stabilizing': bool(np.all(np.diff(steps, axis=0) <= tol)),
        'resolved': bool(steps.size and np.any(steps[0] > tol)),
        'fields': fields,
    }


def norm_audit(field, gain, mu, p=2.0):
    """
    ||u||_{L^p(0,T;L^p(mu_n))}, ||Du|| in the same norm and
    ||du/dt||_{L^2(0,T;L^2(mu_n))} from grid differences.
    """
    dom = field.dom
    interior = dom.interior
    weights = mu.density(dom.points[interior]) * dom.cell_volume
    dt = field.dt

    def time_norm(values, q):
        return float((dt * np.sum(np.abs(values) ** q @ weights)) ** (1.0 / q))

    u = field.u[:-1, interior]
    grads = np.zeros_like(u)
    for k in range(field.steps):
        parts = np.gradient(field.grid('u', k), *dom.spacing)
        parts = parts if dom.n > 1 else [parts]
        grads[k] = np.sqrt(sum(part.ravel()[interior] ** 2 for part in parts))
    rate = (field.u[1:, interior] - field.u[:-1, interior]) / dt

    count = interior.size * field.steps
    reports = {
        'u': NormReport('u', p, 'grid', count, time_norm(u, p)),
        'grad': NormReport('Du', p, 'grid', count, time_norm(grads, p)),
        'time': NormReport('du/dt', 2.0, 'grid', count, time_norm(rate, 2.0)),
    }
    bound = 2.0 * gain.theta_bar * field.horizon ** (1.0 / p)
    reports['bound'] = bound
    reports['within_bound'] = bool(reports['u'].value <= bound)
    return reports


def lipschitz_profile(field):
    """Largest adjacent-node slope of U at each time level."""
    slopes = np.zeros(field.steps + 1)
    for k in range(field.steps + 1):
        grid = field.grid('U', k)
        for axis in range(field.dom.n):
            step = np.abs(np.diff(grid, axis=axis)) / field.dom.spacing[axis]
            slopes[k] = max(slopes[k], float(step.max()))
    return slopes


def grid_refinement_study(coeffs, forcing, R, nodes, time_steps, probes, levels=3, n=None):
    """
    PSOR solves on nested grids (h, dt), (h/2, dt/2), ...; the observed
    order q comes from successive probe differences.
    """
    if levels < 3:
        raise ValidationError('grid.levels', 'at least three refinement levels are required')
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    rows = []
    values = []
    for level in range(levels):
        scale = 2 ** level
        count = [(k - 1) * scale + 1 for k in np.atleast_1d(nodes)]
        dom = DomainSpec(R, count, n)
        field = solve_psor(coeffs, forcing, dom, time_steps * scale)
        values.append(field.probe(probes[:, :dom.n], 0, 'U'))
        rows.append({'level': level, 'h': float(dom.spacing[0]), 'dt': field.dt})

    values = np.array(values)
    differences = np.max(np.abs(np.diff(values, axis=0)), axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        orders = np.log2(differences[:-1] / differences[1:])
    for row, difference in zip(rows[1:], differences):
        row['difference'] = float(difference)
    return {'rows': rows, 'differences': differences.tolist(),
            'order': float(orders[-1]), 'values': values}


def probe_rows(field, points, every=1):
    points = np.atleast_2d(np.asarray(points, dtype=float))[:, :field.dom.n]
    rows = []
    for k in range(0, field.steps + 1, every):
        u = field.probe(points, k, 'u')
        U = field.probe(points, k, 'U')
        for point, uu, UU in zip(points, u, U):
            row = {'t': float(field.times[k]), 'u': float(uu), 'U': float(UU), 'theta': float(UU - uu)}
            for axis, x in enumerate(point):
                row['x{}'.format(axis + 1)] = float(x)
            rows.append(row)
    return rows


def probe_headers(n):
    return ['t'] + ['x{}'.format(axis + 1) for axis in range(n)] + PROBE_HEADERS_TAIL


def write_probes(field, points, destination, every=1):
    return utils.write_csv(probe_rows(field, points, every), probe_headers(field.dom.n), destination)


def write_field(field, destination):
    """
    Little-endian layout: magic 'SLVF', uint32 version, int64 n, int64 M,
    float64 R, T, alpha, epsilon, theta, lower_tol, int64 counts[n], then
    float64 u and float64 U, each (M+1) x prod(counts) in C order.
    """
    meta = field.meta
    header = FIELD_MAGIC + struct.pack(
        '<Iqq6d', FIELD_VERSION, field.dom.n, field.steps, field.dom.R, field.horizon,
        float(meta.get('alpha', math.inf)), float(meta.get('epsilon', 0.0)),
        float(meta.get('theta', 1.0)), field.lower_tol)
    header += struct.pack('<{}q'.format(field.dom.n), *field.dom.counts)
    body = (np.ascontiguousarray(field.u, dtype='<f8').tobytes() +
            np.ascontiguousarray(field.U, dtype='<f8').tobytes())
    utils.write(header + body, destination, binary=True)
    return destination


def read_field(source):
    with open(source, 'rb') as fh:
        raw = fh.read()
    if raw[:4] != FIELD_MAGIC:
        raise ValidationError(source, 'not a value-field file')
    head = struct.calcsize('<Iqq6d')
    version, n, steps, R, horizon, alpha, epsilon, theta, lower_tol = struct.unpack('<Iqq6d', raw[4:4 + head])
    if version != FIELD_VERSION:
        raise ValidationError(source, 'unsupported field version {}'.format(version))
    offset = 4 + head
    counts = struct.unpack('<{}q'.format(n), raw[offset:offset + 8 * n])
    offset += 8 * n

    dom = DomainSpec(R, list(counts), n)
    data = np.frombuffer(raw[offset:], dtype='<f8')
    size = (steps + 1) * dom.size
    if data.size != 2 * size:
        raise ConsistencyError("field file {} is truncated".format(source))
    u = data[:size].reshape(steps + 1, dom.size).copy()
    U = data[size:].reshape(steps + 1, dom.size).copy()
    meta = {'method': 'penalized' if epsilon > 0 else 'psor', 'alpha': alpha, 'n': n,
            'epsilon': epsilon, 'theta': theta, 'R': R}
    times = np.linspace(0.0, horizon, steps + 1)
    return ValueField(times, u, U - u, dom, meta, lower_tol)
