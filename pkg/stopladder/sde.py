"""
Euler-Maruyama simulation of the reduced SDE

    dX = A_{alpha,n} X dt + sigma^(n)(X) dW^0 + eps_n sum_i phi_i dW^i

with noise streams keyed by (seed, path block, channel), so that every
rung of the ladder can be driven by the same Brownian increments.
"""

import concurrent.futures
import logging
import math
import struct

import numpy as np

from . import utils
from .errors import (
    ContractError, DimensionError, ScheduleError, SimulationError, ValidationError)
from .measures import seeded_generator
from .models import ConvergenceReport
from .operators import yosida

# Paths per noise block. Path i always draws from block i // BLOCK_SIZE, so
# changing the path count never re-correlates existing paths.
BLOCK_SIZE = 256

# Explicit drift steps with |A_alpha| dt above this are reported as stiff.
STIFFNESS_LIMIT = 0.5

SCHEDULE_RULES = ('inverse', 'inverse_log', 'table')

# Stream tag for random initial states; noise channels use 0..n.
INITIAL_TAG = 2 ** 31 - 1

PATHS_MAGIC = b'SLPB'


def epsilon_schedule(n, rule='inverse', scale=1.0, values=None):
    if n < 1:
        raise DimensionError("schedule index must be >= 1 (got {})".format(n))
    if rule == 'inverse':
        return scale / n
    if rule == 'inverse_log':
        return scale / (math.sqrt(n) * math.log(n + 1.0))
    if rule == 'table':
        if values is None or n > len(values):
            raise ScheduleError("schedule table has no entry for n={}".format(n))
        return float(values[n - 1])
    raise ScheduleError("unknown schedule rule {!r}".format(rule))


def check_schedule(values):
    """Require eps_n > 0 and sqrt(n) * eps_n strictly decreasing."""
    values = np.asarray(values, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values <= 0):
        raise ScheduleError("schedule values must be positive")
    scaled = np.sqrt(np.arange(1, values.size + 1)) * values
    bad = np.flatnonzero(np.diff(scaled) >= 0)
    if bad.size:
        n = int(bad[0]) + 2
        raise ScheduleError(
            "sqrt(n)*eps_n must decrease to zero; it does not decrease at n={} "
            "({:.6g} -> {:.6g})".format(n, scaled[n - 2], scaled[n - 1]))
    return scaled


def schedule_values(problem):
    schedule = problem.schedule
    return [epsilon_schedule(n, schedule.get('rule', 'inverse'),
                             schedule.get('scale', 1.0), schedule.get('values'))
            for n in range(1, problem.n_master + 1)]


def schedule_diagnostics(problem):
    """Rows (n, eps_n, sqrt(n) eps_n, eps_n / lambda_n) over 1..N_master."""
    values = schedule_values(problem)
    scaled = check_schedule(values)
    lambdas = problem.covariance.lambdas
    return [{
        'n': n,
        'epsilon': values[n - 1],
        'sqrt_n_epsilon': float(scaled[n - 1]),
        'epsilon_over_lambda': values[n - 1] / lambdas[n - 1],
    } for n in range(1, problem.n_master + 1)]


class FiniteModel(object):
    """
    One (alpha, n, eps_n) rung of the ladder.

    noise='cylindrical' drives sigma^(n) with W^0 and adds eps_n dW^i per
    coordinate; noise='q_wiener' drops W^0 and weights channel i by
    sqrt(lambda_i), which is the symmetric OU setting.
    """

    def __init__(self, drift, diffusion, cov, epsilon_n, horizon,
                 noise='cylindrical', scheme='explicit'):
        if noise not in ('cylindrical', 'q_wiener'):
            raise ValidationError('model.noise', "must be 'cylindrical' or 'q_wiener'")
        if scheme not in ('explicit', 'implicit', 'auto'):
            raise ValidationError('model.scheme', "must be 'explicit', 'implicit' or 'auto'")
        if epsilon_n < 0:
            raise ValidationError('model.epsilon_n', 'must be non-negative')
        self.drift = drift
        self.diffusion = diffusion
        self.cov = cov
        self.epsilon_n = float(epsilon_n)
        self.horizon = float(horizon)
        self.noise = noise
        self.scheme = scheme

    @property
    def n(self):
        return self.drift.n

    @property
    def alpha(self):
        return self.drift.alpha

    @property
    def channel_weights(self):
        if self.noise == 'q_wiener':
            return np.sqrt(self.cov.lambdas[:self.n])
        return np.full(self.n, self.epsilon_n)

    def sigma(self, X):
        return self.diffusion.sigma(X, self.cov)

    def stiffness(self, dt):
        return self.drift.norm() * dt

    def implicit(self, dt):
        if self.scheme == 'auto':
            return self.stiffness(dt) > STIFFNESS_LIMIT
        return self.scheme == 'implicit'

    def meta(self):
        return {'alpha': self.alpha, 'n': self.n, 'epsilon_n': self.epsilon_n, 'noise': self.noise}


def build_model(problem, alpha, n, noise='cylindrical', scheme='explicit', epsilon_n=None):
    if epsilon_n is None:
        values = schedule_values(problem)
        check_schedule(values)
        epsilon_n = values[n - 1]
    drift = yosida(problem.operator, alpha, n)
    return FiniteModel(drift, problem.diffusion, problem.covariance, epsilon_n,
                       problem.horizon, noise=noise, scheme=scheme)


class PathBundle(object):

    def __init__(self, times, paths, increments, seed, x0, t0, dt, meta):
        self.times = times
        self.paths = paths
        self.increments = increments
        self.seed = seed
        self.x0 = x0
        self.t0 = t0
        self.dt = dt
        self.meta = dict(meta)

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def n(self):
        return self.paths.shape[2]

    @property
    def steps(self):
        return len(self.times) - 1

    def terminal(self):
        return self.paths[:, -1, :]

    def to_object(self):
        return {
            'paths': self.n_paths,
            'n': self.n,
            'times': len(self.times),
            'seed': self.seed,
            't0': self.t0,
            'dt': self.dt,
            'meta': self.meta,
        }


def _blocks(n_paths):
    for block in range(int(math.ceil(n_paths / float(BLOCK_SIZE)))):
        offset = block * BLOCK_SIZE
        yield block, offset, min(BLOCK_SIZE, n_paths - offset)


def block_noise(seed, block, size, steps, dt, channels):
    """Brownian increments of shape (size, steps, len(channels))."""
    out = np.empty((size, steps, len(channels)))
    root = math.sqrt(dt)
    for index, channel in enumerate(channels):
        rng = seeded_generator(seed, block, channel)
        out[:, :, index] = rng.standard_normal((BLOCK_SIZE, steps))[:size] * root
    return out


def coarsen(noise, factor):
    """Sum consecutive increments: the same Brownian path on a coarser grid."""
    size, steps, channels = noise.shape
    if steps % factor:
        raise ValidationError('steps', 'refinement factor must divide the step count')
    return noise.reshape(size, steps // factor, factor, channels).sum(axis=2)


def march(model, x0, dt, noise, record=None, offset=0):
    """
    Euler-Maruyama from the (size, n) states x0 with increments
    noise[:, k, c] for channel c = 0..n. Returns states at the recorded
    step indices.
    """
    size, steps, _ = noise.shape
    n = model.n
    if record is None:
        record = np.arange(steps + 1)
    out = np.empty((size, len(record), n))

    X = np.array(x0, dtype=float, copy=True)
    position = 0
    if record[0] == 0:
        out[:, 0] = X
        position = 1

    drift_t = model.drift.matrix.T
    weights = model.channel_weights
    implicit = model.implicit(dt)
    if implicit:
        solve_t = np.linalg.inv(np.eye(n) - dt * model.drift.matrix).T
    cylindrical = model.noise == 'cylindrical'

    for k in range(steps):
        dW = noise[:, k, :]
        shock = weights * dW[:, 1:n + 1]
        if cylindrical:
            shock = shock + model.sigma(X) * dW[:, :1]
        if implicit:
            X = (X + shock) @ solve_t
        else:
            X = X + (X @ drift_t) * dt + shock

        if not np.all(np.isfinite(X)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise SimulationError(offset + bad, k + 1)

        if position < len(record) and record[position] == k + 1:
            out[:, position] = X
            position += 1
    return out


def _initial_states(x0, n, block, offset, size, seed, initial_law):
    if initial_law is not None:
        rng = seeded_generator(seed, block, INITIAL_TAG)
        draws = rng.standard_normal((BLOCK_SIZE, n))[:size]
        return draws * np.sqrt(initial_law.variances[:n])
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2:
        return x0[offset:offset + size, :n]
    return np.broadcast_to(x0[:n], (size, n))


def simulate_paths(model, x0, t0=0.0, steps=100, n_paths=1000, seed=0, record=None,
                   retain_increments=True, initial_law=None, jobs=1):
    """
    Simulate n_paths paths on the uniform grid t0 < ... < T.

    record selects the step indices kept in the bundle (all by default);
    initial_law, when given, draws each path's start from that Gaussian.
    """
    if steps < 1:
        raise ValidationError('paths.steps', 'must be >= 1')
    if n_paths < 1:
        raise ValidationError('paths.count', 'must be >= 1')
    if not t0 < model.horizon:
        raise ValidationError('paths.t0', 'must lie before the horizon')

    n = model.n
    dt = (model.horizon - t0) / steps
    if initial_law is None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape[-1] < n:
            raise DimensionError("start point has {} coordinates, model needs {}".format(x0.shape[-1], n))
        if x0.ndim == 2 and x0.shape[0] != n_paths:
            raise DimensionError("per-path start points must match the path count")

    if record is None:
        record = np.arange(steps + 1)
    record = np.unique(np.concatenate([[0], np.asarray(record, dtype=int)]))
    if record[-1] > steps:
        raise ValidationError('paths.record', 'recorded step beyond the horizon')

    if model.stiffness(dt) > STIFFNESS_LIMIT:
        logging.warning(
            "Stiff drift: |A_alpha| dt = %.3f at alpha=%s (scheme: %s).",
            model.stiffness(dt), model.alpha, 'implicit' if model.implicit(dt) else 'explicit')

    channels = list(range(n + 1))

    def run_block(args):
        block, offset, size = args
        noise = block_noise(seed, block, size, steps, dt, channels)
        start = _initial_states(x0, n, block, offset, size, seed, initial_law)
        states = march(model, start, dt, noise, record, offset)
        return states, (noise if retain_increments else None)

    blocks = list(_blocks(n_paths))
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_block, blocks))
    else:
        results = [run_block(args) for args in blocks]

    paths = np.concatenate([states for states, _ in results], axis=0)
    increments = None
    if retain_increments:
        increments = np.concatenate([noise for _, noise in results], axis=0)

    times = t0 + dt * record
    utils.debug("Simulated {} paths x {} steps (n={}, alpha={})".format(n_paths, steps, n, model.alpha))
    start = None if initial_law is not None else np.array(x0, dtype=float)
    return PathBundle(times, paths, increments, seed, start, t0, dt, model.meta())


def write_paths(bundle, destination):
    """
    Flat binary dump: magic 'SLPB', uint32 version, int64 (paths, times, n),
    then float64 times and float64 states in C order, all little-endian.
    """
    header = PATHS_MAGIC + struct.pack('<I3q', 1, bundle.n_paths, len(bundle.times), bundle.n)
    body = (np.ascontiguousarray(bundle.times, dtype='<f8').tobytes() +
            np.ascontiguousarray(bundle.paths, dtype='<f8').tobytes())
    utils.write(header + body, destination, binary=True)
    return destination


def read_paths(source):
    with open(source, 'rb') as fh:
        raw = fh.read()
    if raw[:4] != PATHS_MAGIC:
        raise ValidationError(source, 'not a path dump')
    _, n_paths, n_times, n = struct.unpack('<I3q', raw[4:32])
    data = np.frombuffer(raw[32:], dtype='<f8')
    times = data[:n_times].copy()
    paths = data[n_times:].reshape(n_paths, n_times, n).copy()
    return times, paths


def _sup_sq(diff):
    return np.max(np.sum(diff ** 2, axis=2), axis=1)


def _stats(values):
    values = np.asarray(values)
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return float(np.mean(values)), stderr


def _start(problem, x0):
    if x0 is None:
        return np.zeros(problem.n_master)
    out = np.zeros(problem.n_master)
    x0 = np.ravel(x0)
    out[:x0.size] = x0
    return out


def yosida_convergence_study(problem, alphas, n, n_paths, steps, seed,
                             x0=None, reference_alpha=math.inf):
    """E[sup_t |X^(alpha) - X^(ref)|^2] per alpha on shared increments."""
    if not problem.operator.is_diagonal:
        raise ContractError("the Yosida study needs a diagonal operator for its exact reference")
    x0 = _start(problem, x0)
    dt = problem.horizon / steps
    reference = build_model(problem, reference_alpha, n)
    models = [build_model(problem, alpha, n) for alpha in alphas]

    errors = [[] for _ in alphas]
    for block, offset, size in _blocks(n_paths):
        noise = block_noise(seed, block, size, steps, dt, range(n + 1))
        start = np.broadcast_to(x0[:n], (size, n))
        ref = march(reference, start, dt, noise, offset=offset)
        for index, model in enumerate(models):
            errors[index].append(_sup_sq(march(model, start, dt, noise, offset=offset) - ref))

    rows = []
    for alpha, chunks in zip(alphas, errors):
        mean, stderr = _stats(np.concatenate(chunks))
        rows.append({'param': alpha, 'error_mean': mean, 'error_stderr': stderr,
                     'paths': n_paths, 'steps': steps, 'seed': seed})
    return ConvergenceReport('yosida', rows)


def galerkin_convergence_study(problem, ns, alpha, n_paths, steps, seed, x0=None):
    """E[sup_t |X^(n) - X^(N_master)|^2] per n with common random numbers."""
    master_n = problem.n_master
    if max(ns) > master_n:
        raise DimensionError("rung {} exceeds N_master={}".format(max(ns), master_n))
    x0 = _start(problem, x0)
    dt = problem.horizon / steps
    master = build_model(problem, alpha, master_n)
    models = [build_model(problem, alpha, n) for n in ns]

    errors = [[] for _ in ns]
    for block, offset, size in _blocks(n_paths):
        noise = block_noise(seed, block, size, steps, dt, range(master_n + 1))
        full = march(master, np.broadcast_to(x0, (size, master_n)), dt, noise, offset=offset)
        for index, model in enumerate(models):
            n = model.n
            reduced = march(model, np.broadcast_to(x0[:n], (size, n)), dt,
                            noise[:, :, :n + 1], offset=offset)
            diff = full.copy()
            diff[:, :, :n] -= reduced
            errors[index].append(_sup_sq(diff))

    rows = []
    for model, chunks in zip(models, errors):
        mean, stderr = _stats(np.concatenate(chunks))
        rows.append({'param': model.n, 'error_mean': mean, 'error_stderr': stderr,
                     'paths': n_paths, 'steps': steps, 'seed': seed,
                     'predictor': model.epsilon_n ** 2 * model.n * problem.horizon})
    return ConvergenceReport('galerkin', rows)


def moment_study(model, x0, steps, n_paths, seed, ps=(1, 2, 4)):
    """
    E[sup_t |X|^p] at M and 2M steps on the same Brownian paths; the
    estimate should not move under step halving.
    """
    x0 = np.ravel(x0)[:model.n]
    fine_dt = model.horizon / (2 * steps)
    coarse_sup, fine_sup = [], []
    for block, offset, size in _blocks(n_paths):
        noise = block_noise(seed, block, size, 2 * steps, fine_dt, range(model.n + 1))
        start = np.broadcast_to(x0, (size, model.n))
        fine = march(model, start, fine_dt, noise, offset=offset)
        coarse = march(model, start, 2 * fine_dt, coarsen(noise, 2), offset=offset)
        fine_sup.append(np.max(np.linalg.norm(fine, axis=2), axis=1))
        coarse_sup.append(np.max(np.linalg.norm(coarse, axis=2), axis=1))
    fine_sup = np.concatenate(fine_sup)
    coarse_sup = np.concatenate(coarse_sup)

    rows = []
    for p in ps:
        fine_mean, fine_err = _stats(fine_sup ** p)
        coarse_mean, coarse_err = _stats(coarse_sup ** p)
        change = abs(fine_mean - coarse_mean)
        rows.append({
            'p': p,
            'moment_coarse': coarse_mean,
            'moment_fine': fine_mean,
            'stderr': fine_err,
            'relative_change': change / fine_mean if fine_mean else 0.0,
            'stable': bool(np.isfinite(fine_mean) and
                           change <= max(0.1 * fine_mean, 3.0 * (fine_err + coarse_err))),
        })
    return rows


def lipschitz_ratios(model, pairs, steps, n_paths, seed):
    """E[sup_t |X^x - X^y|] / |x - y| for each (x, y) pair on shared noise."""
    dt = model.horizon / steps
    sums = np.zeros(len(pairs))
    for block, offset, size in _blocks(n_paths):
        noise = block_noise(seed, block, size, steps, dt, range(model.n + 1))
        for index, (x, y) in enumerate(pairs):
            x = np.ravel(x)[:model.n]
            y = np.ravel(y)[:model.n]
            px = march(model, np.broadcast_to(x, (size, model.n)), dt, noise, offset=offset)
            py = march(model, np.broadcast_to(y, (size, model.n)), dt, noise, offset=offset)
            sup = np.max(np.linalg.norm(px - py, axis=2), axis=1)
            sums[index] += sup.sum()
    distances = np.array([np.linalg.norm(np.ravel(x)[:model.n] - np.ravel(y)[:model.n])
                          for x, y in pairs])
    return sums / n_paths / distances


def lipschitz_check(model, calibration, pairs, steps, n_paths, seed, margin=0.1):
    """Fit C on one calibration pair, then require every pair within (1 + margin) C."""
    fitted = float(lipschitz_ratios(model, [calibration], steps, n_paths, seed)[0])
    ratios = lipschitz_ratios(model, pairs, steps, n_paths, seed)
    return {
        'constant': fitted,
        'max_ratio': float(ratios.max()),
        'passed': bool(np.all(ratios <= (1.0 + margin) * fitted)),
    }


def strong_order_study(model, x0, levels=(16, 32, 64, 128), n_paths=2000, seed=0):
    """
    Strong error E|X_T^M - X_T^ref| against a run with twice the finest
    step count, and the observed order from a log-log fit.
    """
    levels = sorted(levels)
    reference_steps = 2 * levels[-1]
    for level in levels:
        if reference_steps % level:
            raise ValidationError('levels', 'every level must divide the reference step count')
    x0 = np.ravel(x0)[:model.n]
    dt = model.horizon / reference_steps
    totals = np.zeros(len(levels))
    for block, offset, size in _blocks(n_paths):
        noise = block_noise(seed, block, size, reference_steps, dt, range(model.n + 1))
        start = np.broadcast_to(x0, (size, model.n))
        last = np.array([reference_steps])
        reference = march(model, start, dt, noise, last, offset)[:, -1]
        for index, level in enumerate(levels):
            factor = reference_steps // level
            coarse = march(model, start, dt * factor, coarsen(noise, factor),
                           np.array([level]), offset)[:, -1]
            totals[index] += np.linalg.norm(coarse - reference, axis=1).sum()
    errors = totals / n_paths
    if np.all(errors <= 1e-14 * (1.0 + np.linalg.norm(x0))):
        # Euler is exact here (no drift, additive noise)
        order = math.inf
    else:
        order = -np.polyfit(np.log(levels), np.log(errors), 1)[0]
    rows = [{'steps': level, 'strong_error': error} for level, error in zip(levels, errors)]
    return {'rows': rows, 'order': float(order)}
