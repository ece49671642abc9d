"""
Stopping rules read off a value field, their evaluation on simulated paths,
the dynamic-programming checks and two independent oracles: a dense 1D
lattice and least-squares Monte Carlo.
"""

import logging
import math

import numpy as np
from numpy.polynomial import hermite_e
from sklearn.preprocessing import PolynomialFeatures

from . import utils
from .errors import AccuracyError, BasisError, ConsistencyError, ContractError, ValidationError
from .measures import seeded_generator
from .obstacle import NUM_TOL

DEFAULT_DELTA = 10 * NUM_TOL

# Exit fractions above this are worth enlarging R for.
EXIT_WARNING = 0.01

LATTICE_QUADRATURE_NODES = 40

FREE_BOUNDARY_HEADERS = ['t', 'area', 'contact_min', 'contact_max']
STOP_HEADERS = ['rule', 'value_mean', 'value_stderr', 'exit_fraction', 'mean_stop_time']
MARTINGALE_HEADERS = [
    'sigma', 'capped_mean', 'capped_stderr', 'replaced_mean', 'replaced_stderr',
    'gain_mean', 'gain_stderr', 'target', 'passed']

RULE_MODES = ('contact', 'immediate', 'terminal')


def _mean_stderr(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


class StoppingRule(object):
    """
    Stop at the first path time where the interpolated gap u = U - Theta is
    at most delta, or on leaving O_R, or at T.

    The perturbations used for the optimality sandwich are expressed as
    options: gap_shift widens the contact test, lag delays the stop by a
    number of path steps and stop_prob stops in contact only with that
    probability.
    """

    def __init__(self, field, gain, delta=DEFAULT_DELTA, mode='contact', gap_shift=0.0,
                 lag=0, stop_prob=1.0, seed=0, name='optimal'):
        if not delta > NUM_TOL:
            raise ValidationError('rule.delta', 'contact tolerance must exceed the solver tolerance')
        if mode not in RULE_MODES:
            raise ValidationError('rule.mode', "must be one of {}".format(', '.join(RULE_MODES)))
        if not 0 < stop_prob <= 1:
            raise ValidationError('rule.stop_prob', 'must lie in (0, 1]')

        self.field = field
        self.gain = gain
        self.delta = float(delta)
        self.mode = mode
        self.gap_shift = float(gap_shift)
        self.lag = int(lag)
        self.stop_prob = float(stop_prob)
        self.seed = seed
        self.name = name

        self.contact_mask = (field.u <= self.delta).reshape((field.steps + 1,) + field.dom.shape)
        terminal = self.contact_mask[-1].ravel()[field.dom.interior]
        if not np.all(terminal):
            raise ConsistencyError("contact set is not the whole domain at t = T; u(T) != 0")

    @property
    def R(self):
        return self.field.dom.R

    def gap(self, t, X):
        """u(t, X), linear in time between field levels and multilinear in space."""
        field = self.field
        position = min(max(t / field.dt, 0.0), float(field.steps))
        k = min(int(math.floor(position)), field.steps - 1)
        weight = position - k
        X = np.atleast_2d(X)[:, :field.dom.n]
        lower = field.interpolator(k, 'u')(X)
        if weight == 0.0:
            return lower
        return (1.0 - weight) * lower + weight * field.interpolator(k + 1, 'u')(X)

    def value(self, t, X):
        """U(t, X) = u(t, X) + Theta(t, X)."""
        return self.gap(t, X) + self.gain.value(t, X)

    def variant(self, name, **options):
        settings = {
            'delta': self.delta, 'mode': self.mode, 'gap_shift': self.gap_shift,
            'lag': self.lag, 'stop_prob': self.stop_prob, 'seed': self.seed,
        }
        settings.update(options)
        return StoppingRule(self.field, self.gain, name=name, **settings)

    def to_object(self):
        return {
            'name': self.name,
            'mode': self.mode,
            'delta': self.delta,
            'gap_shift': self.gap_shift,
            'lag': self.lag,
            'stop_prob': self.stop_prob,
            'field': self.field.meta,
        }


class StopStats(object):

    def __init__(self, rule, values, stop_index, times, exited):
        self.rule = rule
        self.values = values
        self.stop_index = stop_index
        self.times = times
        self.exited = exited
        self.value_mean, self.value_stderr = _mean_stderr(values)
        self.exit_fraction = float(np.mean(exited))

    @property
    def stop_times(self):
        return self.times[self.stop_index]

    def stop_time_hist(self, bins=10):
        edges = np.linspace(self.times[0], self.times[-1], bins + 1)
        counts, _ = np.histogram(self.stop_times, bins=edges)
        return counts, edges

    def to_row(self):
        return {
            'rule': self.rule.name,
            'value_mean': self.value_mean,
            'value_stderr': self.value_stderr,
            'exit_fraction': self.exit_fraction,
            'mean_stop_time': float(np.mean(self.stop_times)),
        }

    def to_object(self):
        counts, edges = self.stop_time_hist()
        return dict(self.to_row(), stop_time_hist={'counts': counts.tolist(), 'edges': edges.tolist()})


def contact_region(field, gain, delta=DEFAULT_DELTA):
    return StoppingRule(field, gain, delta)


def free_boundary(rule):
    """Per time level: contact-set area and the extent of contact points."""
    field = rule.field
    dom = field.dom
    interior = dom.interior
    points = dom.points[interior]
    rows = []
    for k, t in enumerate(field.times):
        contact = rule.contact_mask[k].ravel()[interior]
        row = {'t': float(t), 'area': float(contact.sum() * dom.cell_volume)}
        if dom.n == 1 and contact.any():
            row['contact_min'] = float(points[contact, 0].min())
            row['contact_max'] = float(points[contact, 0].max())
        rows.append(row)
    return rows


def _same_alpha(a, b):
    return (math.isinf(a) and math.isinf(b)) or math.isclose(a, b, rel_tol=1e-12)


def stop_on_paths(paths, rule, gain=None):
    """First-hitting evaluation of the rule along every path of the bundle."""
    gain = gain or rule.gain
    field_meta = rule.field.meta
    if (paths.meta.get('n') != field_meta.get('n') or
            not _same_alpha(float(paths.meta.get('alpha')), float(field_meta.get('alpha')))):
        raise ContractError(
            "paths simulated at (alpha={}, n={}) but the field was solved at (alpha={}, n={})".format(
                paths.meta.get('alpha'), paths.meta.get('n'), field_meta.get('alpha'), field_meta.get('n')))

    count = paths.n_paths
    last = len(paths.times) - 1
    stop_index = np.full(count, last)
    exited = np.zeros(count, dtype=bool)
    alive = np.ones(count, dtype=bool)
    hit = np.full(count, -1)
    rng = seeded_generator(rule.seed, 0x57)

    for j, t in enumerate(paths.times):
        if not alive.any():
            break
        live = np.flatnonzero(alive)
        X = paths.paths[live, j]

        outside = np.linalg.norm(X, axis=1) >= rule.R
        if rule.mode == 'immediate':
            stop = np.ones(live.size, dtype=bool)
        elif rule.mode == 'terminal' or j == last:
            stop = np.zeros(live.size, dtype=bool)
        else:
            contact = rule.gap(t, X) <= rule.delta + rule.gap_shift
            if rule.stop_prob < 1.0:
                contact &= rng.random(live.size) < rule.stop_prob
            if rule.lag:
                first = contact & (hit[live] < 0)
                hit[live[first]] = j
                stop = (hit[live] >= 0) & (j >= hit[live] + rule.lag)
            else:
                stop = contact

        exited[live[outside & ~stop]] = True
        done = live[stop | outside]
        stop_index[done] = j
        alive[done] = False

    values = np.empty(count)
    for j in np.unique(stop_index):
        chosen = stop_index == j
        values[chosen] = gain.value(paths.times[j], paths.paths[chosen, j])

    stats = StopStats(rule, values, stop_index, paths.times, exited)
    if stats.exit_fraction > EXIT_WARNING:
        logging.warning("%.1f%% of paths left the ball R=%s before stopping.",
                        100 * stats.exit_fraction, rule.R)
    return stats


def perturbed_rules(rule, x0, shift=0.5, lag=5, stop_prob=0.5):
    """
    The five suboptimal variants of the optimality sandwich. The shifted rule
    widens the contact test by a fraction of the gap u(t0, x0), so it neither
    stops at once nor coincides with the optimal rule.
    """
    start = float(rule.gap(rule.field.times[0], np.atleast_2d(np.asarray(x0, dtype=float)))[0])
    return [
        rule.variant('shifted', gap_shift=shift * max(start, 0.0)),
        rule.variant('terminal', mode='terminal'),
        rule.variant('immediate', mode='immediate'),
        rule.variant('randomized', stop_prob=stop_prob),
        rule.variant('lagged', lag=lag),
    ]


def _time_index(times, sigma):
    if not times[0] - 1e-12 <= sigma <= times[-1] + 1e-12:
        raise ValidationError('checks.sigma_times', 'cut time {} outside [t0, T]'.format(sigma))
    return int(np.argmin(np.abs(times - sigma)))


def _exit_index(paths, R):
    outside = np.linalg.norm(paths.paths, axis=2) >= R
    return np.where(outside.any(axis=1), outside.argmax(axis=1), len(paths.times) - 1)


def martingale_check(paths, field, rule, sigma_times, tol=5e-3, stats=None):
    """
    E[U(sigma ^ tau*, X)] = U(t0, x0) for deterministic cut times sigma.

    Also reports the estimator with sigma replacing tau* (stopped only on
    exit) and with Theta in place of U; both may only fall below U(t0, x0).
    """
    stats = stats or stop_on_paths(paths, rule)
    times = paths.times
    t0 = times[0]
    target = float(rule.value(t0, paths.paths[:1, 0])[0])
    exit_index = _exit_index(paths, rule.R)
    rows = []

    def evaluate(fn, index):
        values = np.empty(paths.n_paths)
        for j in np.unique(index):
            chosen = index == j
            values[chosen] = fn(times[j], paths.paths[chosen, j])
        return _mean_stderr(values)

    for sigma in sigma_times:
        cut = _time_index(times, sigma)
        capped = np.minimum(stats.stop_index, cut)
        replaced = np.minimum(exit_index, cut)

        capped_mean, capped_err = evaluate(rule.value, capped)
        replaced_mean, replaced_err = evaluate(rule.value, replaced)
        gain_mean, gain_err = evaluate(rule.gain.value, capped)
        rows.append({
            'sigma': float(times[cut]),
            'capped_mean': capped_mean,
            'capped_stderr': capped_err,
            'replaced_mean': replaced_mean,
            'replaced_stderr': replaced_err,
            'gain_mean': gain_mean,
            'gain_stderr': gain_err,
            'target': target,
            'passed': bool(abs(capped_mean - target) <= 3 * capped_err + tol and
                           replaced_mean <= target + 3 * replaced_err + tol and
                           gain_mean <= target + 3 * gain_err + tol),
        })
    return rows


def ou_transition(a, s, dt):
    """Mean factor and standard deviation of one exact OU step."""
    if a == 0:
        return 1.0, s * math.sqrt(dt)
    factor = math.exp(a * dt)
    return factor, s * math.sqrt((math.exp(2.0 * a * dt) - 1.0) / (2.0 * a))


def lattice_oracle_1d(a, s, gain, horizon, x0, R, nodes, steps, epsilon=0.0,
                      exercise_steps=None, quadrature_nodes=LATTICE_QUADRATURE_NODES):
    """
    Backward dynamic programming on a dense grid over [-R, R] with the exact
    one-step Gaussian transition of dX = a X dt + sqrt(s^2 + eps^2) dW.
    Transitions leaving (-R, R) are arrested at the gain.

    exercise_steps restricts exercise to those step indices; T is always
    an exercise date.
    """
    xs = np.linspace(-R, R, nodes)
    h = xs[1] - xs[0]
    dt = horizon / steps
    factor, sd = ou_transition(a, math.hypot(s, epsilon), dt)
    if 0 < sd < h:
        raise AccuracyError(
            "one-step standard deviation {:.3g} is below the grid spacing {:.3g}; refine the grid".format(sd, h))
    if not abs(x0) < R:
        raise AccuracyError("start point {} is off the lattice [-{}, {}]".format(x0, R, R))

    z, w = hermite_e.hermegauss(quadrature_nodes)
    w = w / w.sum()
    times = np.linspace(0.0, horizon, steps + 1)
    exercise = set(range(steps + 1)) if exercise_steps is None else set(exercise_steps) | {steps}
    inside = np.abs(xs) < R

    def payoff(t, x):
        return np.asarray(gain.value(t, np.asarray(x).reshape(-1, 1)), dtype=float).reshape(np.shape(x))

    V = payoff(horizon, xs)
    for k in range(steps - 1, -1, -1):
        later = times[k + 1]
        targets = factor * xs[:, None] + sd * z[None, :]
        arrested = np.abs(targets) >= R
        values = np.interp(targets, xs, V)
        if arrested.any():
            values = np.where(arrested, payoff(later, targets), values)
        continuation = values @ w
        now = payoff(times[k], xs)
        V = np.where(inside, continuation, now)
        if k in exercise:
            V = np.maximum(V, now)
    return float(np.interp(x0, xs, V))


def _gain_at(gain, times, bundle, index):
    """Theta(t_j, X_j) with j = index[i] for each path i."""
    values = np.empty(bundle.shape[0])
    for j in np.unique(index):
        chosen = index == j
        values[chosen] = gain.value(times[j], bundle[chosen, j])
    return values


def _exercise_dates(steps, exercise):
    if exercise == 'terminal':
        return []
    if exercise == 'all':
        return list(range(1, steps))
    return sorted(int(j) for j in exercise if 0 < int(j) < steps)


def lsmc_oracle(paths, gain, basis_degree=3, test_paths=None, exercise='all', R=None):
    """
    Regression Monte Carlo: continuation values are regressed on polynomial
    features of in-the-money states, and the resulting exercise policy is
    evaluated on an independent bundle. Without test_paths the bundle is
    split in half.
    """
    if test_paths is None:
        half = paths.n_paths // 2
        train, test = paths.paths[:half], paths.paths[half:]
    else:
        train, test = paths.paths, test_paths.paths
    times = paths.times
    steps = len(times) - 1
    features = PolynomialFeatures(degree=basis_degree)
    dates = _exercise_dates(steps, exercise)
    width = features.fit(train[:1, 0]).n_output_features_

    def arrested(bundle):
        if R is None:
            return np.full(bundle.shape[0], steps)
        outside = np.linalg.norm(bundle, axis=2) >= R
        return np.where(outside.any(axis=1), outside.argmax(axis=1), steps)

    exit_train = arrested(train)
    cash = _gain_at(gain, times, train, exit_train)

    policy = {}
    for j in reversed(dates):
        live = exit_train > j
        exercise_value = gain.value(times[j], train[:, j])
        money = live & (exercise_value > 0)
        if money.sum() < width:
            utils.debug("LSMC date {}: {} in-the-money paths, skipped".format(j, money.sum()))
            continue
        design = features.transform(train[money, j])
        coef, _, rank, _ = np.linalg.lstsq(design, cash[money], rcond=None)
        if rank < design.shape[1]:
            raise BasisError(
                "regression at step {} is rank deficient ({} < {}); reduce basis_degree".format(
                    j, rank, design.shape[1]))
        policy[j] = coef
        continuation = design @ coef
        take = exercise_value[money] >= continuation
        chosen = np.flatnonzero(money)[take]
        cash[chosen] = exercise_value[chosen]

    # evaluate the frozen policy out of sample
    exit_test = arrested(test)
    stop = exit_test.copy()
    open_ = np.ones(test.shape[0], dtype=bool)
    for j in dates:
        if j not in policy:
            continue
        live = open_ & (exit_test > j)
        exercise_value = gain.value(times[j], test[:, j])
        money = live & (exercise_value > 0)
        if not money.any():
            continue
        continuation = features.transform(test[money, j]) @ policy[j]
        take = np.flatnonzero(money)[exercise_value[money] >= continuation]
        stop[take] = j
        open_[take] = False

    mean, stderr = _mean_stderr(_gain_at(gain, times, test, stop))

    immediate = float(gain.value(times[0], test[:1, 0])[0])
    if exercise != 'terminal' and immediate >= mean:
        return {'value': immediate, 'stderr': 0.0, 'immediate': True, 'dates': len(dates)}
    return {'value': mean, 'stderr': stderr, 'immediate': False, 'dates': len(dates)}
