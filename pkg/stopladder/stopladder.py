#!/usr/bin/env python

import copy
import csv
import itertools
import json
import logging
import math
import os
import time

import numpy as np
import pytablereader

from . import __version__
from . import utils
from .config import dump_config
from .errors import IntegrityError, ValidationError
from .measures import (
    build_measure, default_method, gain_bound_check, gradient_order, lp_norm,
    measure_normalization, random_polynomial, vpn_norm)
from .models import (
    CONVERGENCE_HEADERS, NORM_HEADERS, CovarianceSpec, DiffusionSpec, GainSpec, OperatorSpec,
    ProblemSpec, TimeFactor)
from .obstacle import (
    NUM_TOL, PenaltyParams, DomainSpec, SWEEP_HEADERS, complementarity_residual, domain_sweep,
    grid_refinement_study, lipschitz_profile, norm_audit, penalty_sweep, read_field,
    solve_penalized, solve_psor, value_bounds, write_field, write_probes)
from .operators import (
    TRACE_HEADERS, continuity_check, forcing, generator_coeffs, green_residual,
    project_gain, trace_diagnostics, yosida)
from .ou import (
    STATIONARITY_HEADERS, coercivity_witness, dual_pairing_check, empirical_invariant_check,
    invariant_covariance, solver_agreement, symmetric_form)
from .sde import (
    FiniteModel, build_model, galerkin_convergence_study, lipschitz_check, moment_study,
    schedule_diagnostics, simulate_paths, strong_order_study, yosida_convergence_study)
from .stopping import (
    FREE_BOUNDARY_HEADERS, MARTINGALE_HEADERS, STOP_HEADERS, contact_region, free_boundary,
    lattice_oracle_1d, lsmc_oracle, martingale_check, perturbed_rules, stop_on_paths)

# The columns of the check table, in CSV order.
HEADERS = ["check", "anchor", "status", "measured", "bound", "tolerance"]

# Tasks run in this order; later tasks read what earlier ones wrote.
TASKS = ['core', 'ladder', 'fields', 'sweeps', 'rules', 'ou', 'trivial']

# check id -> (task, property it verifies)
CHECKS = [
    ('measure_normalization', 'core', "Gaussian measure integrates to one"),
    ('gain_bounds', 'core', "gain bounded by Theta_bar with Lipschitz slopes in t and x"),
    ('gradient_consistency', 'core', "Friedrichs gradient converges to the closed form"),
    ('norm_monotonicity', 'core', "L^p(mu_n) norms non-decreasing in p"),
    ('yosida_monotone', 'core', "Yosida drift approaches A as alpha grows"),
    ('ellipticity', 'core', "B = sigma sigma* + eps_n^2 I is uniformly elliptic"),
    ('green_identity', 'core', "bilinear form equals minus the generator pairing"),
    ('continuity_estimate', 'core', "bilinear form bounded in the V^p_n norm"),
    ('trace_class', 'core', "trace partial sums of Q and A Q A* settle"),
    ('schedule', 'core', "sqrt(n) eps_n decreases to zero"),
    ('moment_bounds', 'ladder', "sup-moments of paths stable under step halving"),
    ('lipschitz_paths', 'ladder', "coupled paths Lipschitz in the start point"),
    ('strong_order', 'ladder', "Euler-Maruyama strong order at least one half"),
    ('yosida_convergence', 'ladder', "Yosida rungs converge on coupled paths"),
    ('galerkin_convergence', 'ladder', "Galerkin rungs converge on coupled paths"),
    ('obstacle_agreement', 'fields', "penalized, PSOR and lattice values agree"),
    ('complementarity', 'fields', "complementarity residual of the obstacle problem vanishes"),
    ('value_bounds', 'fields', "0 <= U <= Theta_bar with exact terminal and boundary data"),
    ('spatial_lipschitz', 'fields', "value function Lipschitz in space uniformly in t"),
    ('penalty_convergence', 'sweeps', "penalized solutions converge as eps -> 0"),
    ('domain_stabilization', 'sweeps', "arrested values stabilize as R grows"),
    ('grid_convergence', 'sweeps', "grid refinement converges with order near one"),
    ('norm_audit', 'sweeps', "solution norms bounded uniformly over the ladder"),
    ('optimal_rule', 'rules', "first hitting of the contact set attains the value"),
    ('perturbed_rules', 'rules', "perturbed stopping rules do not beat the value"),
    ('martingale', 'rules', "value stopped at sigma ^ tau* keeps its mean"),
    ('lsmc_agreement', 'rules', "regression Monte Carlo agrees with the grid value"),
    ('invariant_measure', 'ou', "stationary covariance equals -1/2 A^-1 Q"),
    ('symmetric_form', 'ou', "invariant-measure form is symmetric and nonnegative"),
    ('dual_pairing', 'ou', "Green's formula under the invariant measure"),
    ('ou_uniqueness', 'ou', "penalized and PSOR solutions agree in L2(nu)"),
    ('trivial_instances', 'trivial', "closed-form trivial instances reproduced exactly"),
]

CHECK_IDS = [check_id for check_id, _, _ in CHECKS]
CHECK_TASK = {check_id: task for check_id, task, _ in CHECKS}
CHECK_ANCHOR = {check_id: anchor for check_id, _, anchor in CHECKS}

CHECKS_FILE = 'checks.csv'
MANIFEST_FILE = 'manifest.json'

# Monte Carlo comparisons allow 3 standard errors plus these.
RULE_TOL = 5e-3
LSMC_TOL = 1e-2

SWEEP_RESULT_HEADERS = ['alpha', 'n', 'p', 'U0', 'norm_u', 'norm_grad', 'norm_time', 'bound']
TREND_HEADERS = ['parameter', 'p', 'norm', 'relative_slope', 'flat']


def row_for(check_id, passed, measured, bound, tolerance):
    return {
        'check': check_id,
        'anchor': CHECK_ANCHOR[check_id],
        'status': 'pass' if passed else 'fail',
        'measured': measured,
        'bound': bound,
        'tolerance': tolerance,
    }


def error_row(check_id, error):
    return {
        'check': check_id,
        'anchor': CHECK_ANCHOR[check_id],
        'status': 'error',
        'measured': None,
        'bound': None,
        'tolerance': str(error),
    }


class RunContext(object):
    """Where a run writes, how it seeds and how many workers it may use."""

    def __init__(self, config, output_dir, jobs=1):
        self.config = config
        self.output_dir = output_dir
        self.jobs = jobs
        self.artifacts = {}
        self.task = None

    def seed_for(self, name):
        return utils.task_seed(self.config.seed, name)

    def path(self, name):
        return os.path.join(self.output_dir, name)

    def emit(self, name):
        """Register an artifact of the current task and return its path."""
        self.artifacts.setdefault(self.task, [])
        if name not in self.artifacts[self.task]:
            self.artifacts[self.task].append(name)
        return self.path(name)


def _problem_parts(config, alpha=None, n=None):
    spec = config.spec
    alpha = config.alpha if alpha is None else alpha
    n = config.n if n is None else n
    drift = yosida(spec.operator, alpha, n)
    model = build_model(spec, alpha, n)
    coeffs = generator_coeffs(drift, spec.diffusion, spec.covariance, model.epsilon_n)
    gain = project_gain(spec.gain, n, spec.n_master)
    return spec, model, coeffs, gain


def _kinks(gain):
    if gain.family == 'constant':
        return []
    sign = 1.0 if gain.family == 'call' else -1.0
    return [gain.strike, gain.strike + sign * gain.cap]


def _smooth_points(gain, mu, seed, spacing, count=8):
    """Measure samples whose <ell, x> stays away from the kinks of the gain."""
    points = mu.sample(256, seed)
    ell = np.zeros(points.shape[1])
    k = min(points.shape[1], gain.ell.size)
    ell[:k] = gain.ell[:k]
    y = points @ ell
    keep = np.ones(points.shape[0], dtype=bool)
    for kink in _kinks(gain):
        keep &= np.abs(y - kink) > spacing * (1.0 + np.linalg.norm(ell))
    return points[keep][:count]


def core_task(config, context, wanted):
    spec = config.spec
    n = config.n
    seed = context.seed_for('core')
    nodes = int(config.ladder['quadrature_nodes'])
    mu = build_measure(spec.covariance, n)
    method = default_method(mu)
    rows = {}

    mean, stderr = measure_normalization(mu, nodes=nodes, seed=seed)
    tol = 1e-10 if method == 'hermite' else 3 * stderr
    rows['measure_normalization'] = row_for(
        'measure_normalization', abs(mean - 1.0) <= tol, abs(mean - 1.0), 0.0, tol)

    bounds = gain_bound_check(spec.gain, spec.n_master, samples=10000, seed=seed)
    rows['gain_bounds'] = row_for(
        'gain_bounds', bounds['passed'], bounds['max_value'], bounds['theta_bar'], 0.01)

    polynomial = random_polynomial(n, 3, seed)
    orders = [gradient_order(polynomial.value, polynomial.grad, mu.sample(1, seed)[0])]
    reduced = project_gain(spec.gain, n, spec.n_master)
    for point in _smooth_points(spec.gain, mu, seed, 0.2):
        orders.append(gradient_order(lambda X: reduced.value(0.0, X),
                                     lambda X: reduced.gradient(0.0, X), point))
    worst = min(order['order'] for order in orders)
    rows['gradient_consistency'] = row_for(
        'gradient_consistency', all(o['exact'] or o['order'] >= 1.9 for o in orders), worst, 1.9, 0.0)

    norm_rows = []
    values = []
    for p in sorted(set([1.0] + [float(p) for p in config.ladder['norm_p']])):
        report = lp_norm(polynomial.value, p, mu, nodes=nodes, seed=seed, name='polynomial')
        norm_rows.append(report.to_row())
        values.append(report.value)
    for p in config.ladder['norm_p']:
        if float(p) > 1:
            coordinate = vpn_norm(lambda X: X[:, 0], lambda X: np.eye(n)[[0] * X.shape[0]],
                                  float(p), mu, nodes=nodes, seed=seed, name='x1')
            norm_rows.append(coordinate.to_row())
    drops = np.diff(values)
    rows['norm_monotonicity'] = row_for(
        'norm_monotonicity', bool(np.all(drops >= -1e-12 * max(values))),
        float(drops.min()) if drops.size else 0.0, 0.0, 1e-12)
    utils.write_csv(norm_rows, NORM_HEADERS, context.emit('norms.csv'))

    reference = yosida(spec.operator, math.inf, n).matrix
    gaps = [float(np.max(np.abs(yosida(spec.operator, float(a), n).matrix - reference)))
            for a in sorted(float(a) for a in config.ladder['alphas'])]
    rows['yosida_monotone'] = row_for(
        'yosida_monotone', bool(np.all(np.diff(gaps) <= 1e-15)), gaps[-1] if gaps else 0.0, 0.0, 1e-15)

    _, model, coeffs, _ = _problem_parts(config)
    sample = mu.sample(2000, seed)
    smallest = float(coeffs.min_eigenvalue(sample).min())
    floor = model.epsilon_n ** 2
    rows['ellipticity'] = row_for(
        'ellipticity', smallest >= floor * (1.0 - 1e-9), smallest, floor, 1e-9)

    if 'green_identity' in wanted or 'continuity_estimate' in wanted:
        u = random_polynomial(n, 2, seed + 1)
        w = random_polynomial(n, 2, seed + 2)
        if method != 'hermite' or spec.diffusion.kind == 'constant':
            residual = green_residual(coeffs, u, w, mu, nodes=nodes)
            tol = 1e-8 if method == 'hermite' else 1e-2
        else:
            # Gauss-Hermite is not exact for tanh coefficients; the change
            # between two node counts estimates its error.
            fine = mu.axis_nodes(2 * nodes)
            coarse = mu.axis_nodes(nodes) if mu.axis_nodes(nodes) < fine else max(2, fine // 2)
            rough = green_residual(coeffs, u, w, mu, nodes=coarse)
            residual = green_residual(coeffs, u, w, mu, nodes=fine)
            tol = 1e-8 + abs(rough - residual)
        rows['green_identity'] = row_for('green_identity', residual <= tol, residual, 0.0, tol)

        calibration = [(random_polynomial(n, 2, seed + 10 + i), random_polynomial(n, 2, seed + 20 + i))
                       for i in range(5)]
        suite = [(random_polynomial(n, 2, seed + 30 + i), random_polynomial(n, 2, seed + 40 + i))
                 for i in range(5)]
        continuity = continuity_check(coeffs, calibration, suite, mu, 2.0, nodes=nodes)
        rows['continuity_estimate'] = row_for(
            'continuity_estimate', continuity['passed'], continuity['max_ratio'], continuity['constant'], 0.0)

    trace = trace_diagnostics(spec.operator, spec.covariance)
    utils.write_csv(trace, TRACE_HEADERS, context.emit('trace.csv'))
    rows['trace_class'] = row_for(
        'trace_class', not trace[-1]['assumption_flag'], trace[-1]['tail_ratio'], 0.1, 0.0)

    schedule = schedule_diagnostics(spec)
    utils.write_csv(schedule, ['n', 'epsilon', 'sqrt_n_epsilon', 'epsilon_over_lambda'],
                    context.emit('schedule.csv'))
    scaled = [row['sqrt_n_epsilon'] for row in schedule]
    rows['schedule'] = row_for(
        'schedule', bool(np.all(np.diff(scaled) < 0)), scaled[-1], scaled[0], 0.0)
    return rows


def _pairs(x0, n, seed, count=5, scale=0.2):
    rng = np.random.Generator(np.random.Philox(seed))
    pairs = []
    for _ in range(count):
        shift = rng.standard_normal(n) * scale
        pairs.append((x0[:n] + shift, x0[:n] - shift))
    return pairs


def _trend_row(check_id, report):
    errors = report.errors
    if np.all(errors == 0):
        return row_for(check_id, True, 0.0, 0.0, 0.0)
    return row_for(check_id, report.is_decreasing(strict=True), float(errors[-1]), float(errors[0]), 0.0)


def ladder_task(config, context, wanted):
    spec = config.spec
    n = config.n
    x0 = config.x0
    paths = config.ladder['paths']
    count = int(paths['study_count'])
    steps = int(paths['study_steps'])
    model = build_model(spec, config.alpha, n)
    rows = {}

    if 'yosida_convergence' in wanted:
        alphas = sorted(float(a) for a in config.ladder['alphas'])
        report = yosida_convergence_study(spec, alphas, n, count, steps, context.seed_for('yosida'), x0)
        utils.write_csv(report.to_rows(), CONVERGENCE_HEADERS, context.emit('yosida.csv'))
        rows['yosida_convergence'] = _trend_row('yosida_convergence', report)

    if 'galerkin_convergence' in wanted:
        ns = sorted(int(k) for k in config.ladder['ns'])
        report = galerkin_convergence_study(
            spec, ns, config.alpha, count, steps, context.seed_for('galerkin'), x0)
        utils.write_csv(report.to_rows(), CONVERGENCE_HEADERS + ['predictor'], context.emit('galerkin.csv'))
        rows['galerkin_convergence'] = _trend_row('galerkin_convergence', report)

    if 'moment_bounds' in wanted:
        moments = moment_study(model, x0, steps, count, context.seed_for('moments'))
        utils.write_csv(moments, ['p', 'moment_coarse', 'moment_fine', 'stderr', 'relative_change', 'stable'],
                        context.emit('moments.csv'))
        worst = max(row['relative_change'] for row in moments)
        rows['moment_bounds'] = row_for(
            'moment_bounds', all(row['stable'] for row in moments), worst, 0.1, 0.0)

    if 'lipschitz_paths' in wanted:
        pairs = _pairs(x0, n, context.seed_for('pairs'))
        calibration = (x0[:n], x0[:n] + 0.1 * np.eye(n)[0])
        lipschitz = lipschitz_check(model, calibration, pairs, steps, count, context.seed_for('lipschitz'))
        rows['lipschitz_paths'] = row_for(
            'lipschitz_paths', lipschitz['passed'], lipschitz['max_ratio'], 1.1 * lipschitz['constant'], 0.1)

    if 'strong_order' in wanted:
        strong = strong_order_study(model, x0, n_paths=count, seed=context.seed_for('strong'))
        utils.write_csv(strong['rows'], ['steps', 'strong_error'], context.emit('strong_order.csv'))
        rows['strong_order'] = row_for('strong_order', strong['order'] >= 0.45, strong['order'], 0.45, 0.0)
    return rows


def _lattice_reference(config, coeffs, gain, probes):
    """Lattice values at the probes when the instance is one-dimensional with constant sigma."""
    spec = config.spec
    if config.n != 1 or spec.diffusion.kind != 'constant' or not coeffs.drift.is_diagonal:
        return None
    lattice = config.ladder['lattice']
    a = float(coeffs.drift.diagonal[0])
    s = float(spec.covariance.lambdas[0] * spec.diffusion.gamma_values(np.zeros((1, 1)))[0, 0])
    return np.array([
        lattice_oracle_1d(a, s, gain, spec.horizon, float(probe[0]), float(config.ladder['radius']),
                          int(lattice['nodes']), int(lattice['steps']), epsilon=coeffs.epsilon_n)
        for probe in probes])


def fields_task(config, context, wanted):
    spec, model, coeffs, gain = _problem_parts(config)
    ladder = config.ladder
    grid = ladder['grid']
    steps = int(grid['time_steps'])
    theta = float(ladder['theta'])
    force = forcing(spec.gain, coeffs)
    dom = DomainSpec(float(ladder['radius']), int(grid['nodes']), config.n)
    probes = config.probes if config.probes is not None else config.x0[None, :config.n]

    psor = solve_psor(coeffs, force, dom, steps, theta=theta)
    penalized = solve_penalized(coeffs, force, dom, PenaltyParams(float(ladder['epsilon']), steps, theta))
    write_field(psor, context.emit('field_psor.bin'))
    write_field(penalized, context.emit('field_penalized.bin'))
    write_probes(psor, probes, context.emit('probes.csv'), every=max(1, steps // 20))
    rows = {}

    distance = float(np.max(np.abs(penalized.U - psor.U)))
    values = {'psor': psor.probe(probes, 0), 'penalized': penalized.probe(probes, 0)}
    lattice = _lattice_reference(config, coeffs, gain, probes)
    if lattice is not None:
        values['lattice'] = lattice
    spread = max(float(np.max(np.abs(values[a] - values[b])))
                 for a, b in itertools.combinations(sorted(values), 2))
    agreement = []
    for index, probe in enumerate(probes):
        row = {'probe': ' '.join(repr(float(x)) for x in probe)}
        row.update({key: float(vals[index]) for key, vals in values.items()})
        agreement.append(row)
    utils.write_csv(agreement, ['probe', 'penalized', 'psor', 'lattice'], context.emit('agreement.csv'))
    rows['obstacle_agreement'] = row_for(
        'obstacle_agreement', distance <= 1e-3 and spread <= RULE_TOL, spread, RULE_TOL, 1e-3)
    utils.debug("Penalized vs PSOR sup distance {:.3e}".format(distance))

    residual = complementarity_residual(psor, coeffs, force)
    rows['complementarity'] = row_for('complementarity', residual['sup'] <= 1e-6, residual['sup'], 1e-6, 0.0)

    checked = [value_bounds(field, gain.theta_bar) for field in (psor, penalized)]
    rows['value_bounds'] = row_for(
        'value_bounds', all(report['passed'] for report in checked),
        max(report['max_U'] for report in checked), gain.theta_bar, NUM_TOL)

    if 'spatial_lipschitz' in wanted:
        x0 = config.x0
        calibration = (x0[:config.n], x0[:config.n] + 0.1 * np.eye(config.n)[0])
        paths = ladder['paths']
        fitted = lipschitz_check(model, calibration, [calibration], int(paths['study_steps']),
                                 int(paths['study_count']), context.seed_for('lipschitz'))
        slopes = lipschitz_profile(psor)
        bound = 1.1 * gain.lip_x * fitted['constant']
        rows['spatial_lipschitz'] = row_for(
            'spatial_lipschitz', float(slopes.max()) <= bound + NUM_TOL, float(slopes.max()), bound, NUM_TOL)
    return rows


def _field_or_solve(context, name, solve):
    """A field written earlier in this run, else a fresh solve."""
    produced = context.artifacts.get('fields', [])
    if name in produced and os.path.exists(context.path(name)):
        return read_field(context.path(name))
    return solve()


def _no_trend(parameters, values, limit=0.05):
    """|regression slope| against the parameter, relative to the mean value."""
    values = np.asarray(values, dtype=float)
    parameters = np.asarray(parameters, dtype=float)
    mean = float(np.mean(np.abs(values)))
    if len(values) < 2 or mean == 0 or np.ptp(parameters) == 0:
        return True, 0.0
    slope = np.polyfit(parameters, values, 1)[0]
    relative = abs(slope) / mean
    return bool(relative <= limit), float(relative)


def _trend_rows(parameter, params, p, series):
    """Growth diagnostics per norm series; reported, never a failure."""
    rows = []
    for name, values in series.items():
        flat, relative = _no_trend(params, values)
        rows.append({'parameter': parameter, 'p': p, 'norm': name,
                     'relative_slope': relative, 'flat': flat})
        if not flat:
            logging.warning("%s grows along %s (relative slope %.3g at p=%g)",
                            name, parameter, relative, p)
    return rows


def sweeps_task(config, context, wanted):
    spec, model, coeffs, gain = _problem_parts(config)
    ladder = config.ladder
    grid = ladder['grid']
    steps = int(grid['time_steps'])
    theta = float(ladder['theta'])
    force = forcing(spec.gain, coeffs)
    dom = DomainSpec(float(ladder['radius']), int(grid['nodes']), config.n)
    probes = config.probes if config.probes is not None else config.x0[None, :config.n]
    mu = build_measure(spec.covariance, config.n)
    rows = {}
    audited = []
    epsilons = [float(e) for e in ladder['epsilons']]
    radii = [float(r) for r in ladder['radii']]

    if 'penalty_convergence' in wanted and len(epsilons) < 3:
        rows['penalty_convergence'] = error_row('penalty_convergence', 'ladder.epsilons needs at least three levels')
    elif epsilons and ('penalty_convergence' in wanted or 'norm_audit' in wanted):
        psor = _field_or_solve(context, 'field_psor.bin',
                               lambda: solve_psor(coeffs, force, dom, steps, theta=theta))
        sweep = penalty_sweep(coeffs, force, dom, epsilons, steps, theta, psor, context.jobs)
        utils.write_csv(sweep['rows'], SWEEP_HEADERS, context.emit('penalty_sweep.csv'))
        distance = np.array([row['distance_to_psor'] for row in sweep['rows']])
        rows['penalty_convergence'] = row_for(
            'penalty_convergence', sweep['decreasing'], float(distance[-1]), float(distance[0]), 0.0)
        audited.append(('epsilon', [math.log10(e) for e in epsilons], sweep['fields']))

    if 'domain_stabilization' in wanted and len(radii) < 2:
        rows['domain_stabilization'] = error_row('domain_stabilization', 'ladder.radii needs at least two radii')
    elif len(radii) >= 2 and ('domain_stabilization' in wanted or 'norm_audit' in wanted):
        result = domain_sweep(coeffs, force, dom, radii, probes, steps, jobs=context.jobs)
        out = [{'R': row['R'], 'probe': ' '.join(repr(x) for x in row['probe']), 'U': row['U']}
               for row in result['rows']]
        utils.write_csv(out, ['R', 'probe', 'U'], context.emit('domain_sweep.csv'))
        by_probe = result['probe_differences']
        if by_probe.shape[0] >= 2:
            bounds = 0.25 * by_probe[-2] + 1e-8
            worst = int(np.argmax(by_probe[-1] - bounds))
            stabilized = bool(np.all(by_probe[-1] <= bounds))
            measured, bound = float(by_probe[-1][worst]), float(bounds[worst])
        else:
            stabilized = True
            measured = bound = float(by_probe.max()) if by_probe.size else 0.0
        if not result['resolved']:
            logging.warning("Radii %s do not resolve truncation: U_R agrees at every probe to %g",
                            radii, NUM_TOL)
        rows['domain_stabilization'] = row_for(
            'domain_stabilization', result['monotone'] and stabilized, measured, bound, 1e-8)
        audited.append(('R', radii, result['fields']))

    if 'grid_convergence' in wanted:
        study = grid_refinement_study(coeffs, force, float(ladder['radius']), int(grid['refinement_nodes']),
                                      int(grid['refinement_steps']), probes, 3, config.n)
        utils.write_csv(study['rows'], ['level', 'h', 'dt', 'difference'], context.emit('grid_refinement.csv'))
        exact = max(study['differences']) <= 1e-10
        rows['grid_convergence'] = row_for(
            'grid_convergence', exact or study['order'] >= 0.9, study['order'], 0.9, 0.0)

    if 'norm_audit' in wanted:
        if not audited:
            base = _field_or_solve(context, 'field_psor.bin',
                                   lambda: solve_psor(coeffs, force, dom, steps, theta=theta))
            audited.append(('R', [base.dom.R], [base]))
        audit_rows = []
        trend_rows = []
        passed = True
        worst_ratio = worst = bound = 0.0
        for p in [float(p) for p in ladder['norm_p']]:
            for parameter, params, fields in audited:
                norms = [norm_audit(field, gain, mu, p) for field in fields]
                for value, report in zip(params, norms):
                    audit_rows.append({
                        'parameter': parameter, 'value': value, 'p': p,
                        'norm_u': report['u'].value, 'norm_grad': report['grad'].value,
                        'norm_time': report['time'].value, 'bound': report['bound']})
                    passed &= report['within_bound']
                    ratio = report['u'].value / report['bound']
                    if ratio >= worst_ratio:
                        worst_ratio, worst, bound = ratio, report['u'].value, report['bound']
                trend_rows.extend(_trend_rows(parameter, params, p, {
                    'Du': [report['grad'].value for report in norms],
                    'du/dt': [report['time'].value for report in norms]}))
        utils.write_csv(audit_rows, ['parameter', 'value', 'p', 'norm_u', 'norm_grad', 'norm_time', 'bound'],
                        context.emit('norm_audit.csv'))
        utils.write_csv(trend_rows, TREND_HEADERS, context.emit('norm_trend.csv'))
        rows['norm_audit'] = row_for('norm_audit', passed, worst, bound, 0.0)
    return rows


def rules_task(config, context, wanted):
    spec, model, coeffs, gain = _problem_parts(config)
    ladder = config.ladder
    dom = DomainSpec(float(ladder['radius']), int(ladder['grid']['nodes']), config.n)
    field = _field_or_solve(context, 'field_psor.bin', lambda: solve_psor(
        coeffs, forcing(spec.gain, coeffs), dom, int(ladder['grid']['time_steps']), theta=float(ladder['theta'])))
    delta = ladder['delta']
    rule = contact_region(field, gain, float(delta) if delta is not None else 10 * NUM_TOL)
    utils.write_csv(free_boundary(rule), FREE_BOUNDARY_HEADERS, context.emit('free_boundary.csv'))

    paths = ladder['paths']
    x0 = config.x0
    bundle = simulate_paths(model, x0, 0.0, int(paths['steps']), int(paths['count']),
                            context.seed_for('rules'), retain_increments=False, jobs=context.jobs)
    target = float(rule.value(0.0, x0[None, :config.n])[0])
    stats = stop_on_paths(bundle, rule, gain)
    perturbed = [stop_on_paths(bundle, variant, gain) for variant in perturbed_rules(rule, x0)]
    utils.write_csv([stats.to_row()] + [s.to_row() for s in perturbed], STOP_HEADERS, context.emit('stops.csv'))
    rows = {}

    gap = abs(stats.value_mean - target)
    rows['optimal_rule'] = row_for(
        'optimal_rule', gap <= 3 * stats.value_stderr + RULE_TOL, gap, 3 * stats.value_stderr + RULE_TOL, RULE_TOL)

    excess = max(s.value_mean - target - 3 * s.value_stderr for s in perturbed)
    rows['perturbed_rules'] = row_for('perturbed_rules', excess <= RULE_TOL, excess, 0.0, RULE_TOL)

    if 'martingale' in wanted:
        sigma_times = ladder['sigma_times'] or [spec.horizon * q for q in (0.25, 0.5, 0.75)]
        checks = martingale_check(bundle, field, rule, sigma_times, RULE_TOL, stats)
        utils.write_csv(checks, MARTINGALE_HEADERS, context.emit('martingale.csv'))
        worst = max(abs(row['capped_mean'] - row['target']) for row in checks)
        rows['martingale'] = row_for('martingale', all(row['passed'] for row in checks), worst, RULE_TOL, RULE_TOL)

    if 'lsmc_agreement' in wanted:
        lsmc = ladder['lsmc']
        training = simulate_paths(model, x0, 0.0, int(paths['steps']), int(lsmc['count']),
                                  context.seed_for('lsmc'), retain_increments=False, jobs=context.jobs)
        result = lsmc_oracle(training, gain, int(lsmc['degree']), R=field.dom.R)
        lattice = _lattice_reference(config, coeffs, gain, x0[None, :1])
        reference = float(lattice[0]) if lattice is not None else target
        gap = abs(result['value'] - reference)
        allowed = 3 * result['stderr'] + LSMC_TOL
        rows['lsmc_agreement'] = row_for('lsmc_agreement', gap <= allowed, gap, allowed, LSMC_TOL)
    return rows


def ou_task(config, context, wanted):
    spec = config.spec
    n = config.n
    section = config.ou or {}
    inv = invariant_covariance(spec.operator, spec.covariance, n)
    seed = context.seed_for('ou')
    nodes = int(section.get('quadrature_nodes', config.ladder['quadrature_nodes']))
    drift = yosida(spec.operator, math.inf, n)
    rows = {}

    if 'invariant_measure' in wanted:
        model = FiniteModel(drift, spec.diffusion, spec.covariance, 0.0, spec.horizon, noise='q_wiener')
        report = empirical_invariant_check(
            model, inv, int(section.get('paths', 100000)), seed,
            from_invariant=bool(section.get('from_invariant', False)), jobs=context.jobs)
        utils.write_csv(report['rows'], STATIONARITY_HEADERS, context.emit('stationarity.csv'))
        worst = max(abs(row['gamma_empirical'] - row['gamma_theory']) / row['stderr'] for row in report['rows'])
        rows['invariant_measure'] = row_for(
            'invariant_measure', report['passed'] and report['stationary'], worst, 3.0, 0.0)

    if 'symmetric_form' in wanted:
        asymmetry = 0.0
        lowest = math.inf
        for index in range(100):
            u = random_polynomial(n, 3, seed + 2 * index)
            w = random_polynomial(n, 3, seed + 2 * index + 1)
            scale = 1.0 + abs(symmetric_form(u, w, inv, nodes=nodes))
            asymmetry = max(asymmetry, abs(symmetric_form(u, w, inv, nodes=nodes) -
                                           symmetric_form(w, u, inv, nodes=nodes)) / scale)
            witness = coercivity_witness(u, inv, nodes=nodes)
            lowest = min(lowest, witness['form'])
        rows['symmetric_form'] = row_for(
            'symmetric_form', asymmetry <= 1e-9 and lowest >= -1e-12, asymmetry, 1e-9, 1e-12)

    if 'dual_pairing' in wanted:
        worst = 0.0
        factor = spec.gain.time_factor
        for index in range(10):
            theta = random_polynomial(n, 2, seed + 500 + index)
            w = random_polynomial(n, 2, seed + 600 + index)
            check = dual_pairing_check(theta, factor, w, inv, 0.5 * spec.horizon, nodes=nodes)
            worst = max(worst, check['residual'] / (1.0 + abs(check['direct'])))
        rows['dual_pairing'] = row_for('dual_pairing', worst <= 1e-9, worst, 0.0, 1e-9)

    if 'ou_uniqueness' in wanted:
        grid = section.get('grid', config.ladder['grid'])
        steps = int(grid['time_steps'])
        coeffs = generator_coeffs(drift, spec.diffusion, spec.covariance, 0.0, noise='q_wiener')
        force = forcing(spec.gain, coeffs)
        dom = DomainSpec(float(section.get('radius', config.ladder['radius'])), int(grid['nodes']), n)
        psor = solve_psor(coeffs, force, dom, steps)
        penalized = solve_penalized(coeffs, force, dom, PenaltyParams(float(config.ladder['epsilon']), steps))
        distance = solver_agreement(penalized, psor, inv)
        rows['ou_uniqueness'] = row_for('ou_uniqueness', distance <= 1e-3, distance, 1e-3, 0.0)
    return rows


def _trivial_problem(gain, a=-0.5, s=0.3):
    """One-dimensional instance with constant sigma and alpha = inf."""
    problem = ProblemSpec(OperatorSpec('diagonal', [a]), CovarianceSpec([1.0]),
                          DiffusionSpec('constant', [s]), gain, {'rule': 'inverse', 'scale': 0.01})
    model = build_model(problem, math.inf, 1)
    coeffs = generator_coeffs(model.drift, problem.diffusion, problem.covariance, model.epsilon_n)
    return problem, model, coeffs


def trivial_task(config, context, wanted):
    """Theta = c, Theta = T - t and a strictly increasing Theta on a small grid."""
    seed = context.seed_for('trivial')
    horizon = 1.0
    dom = DomainSpec(4.0, 81, 1)
    steps = 40
    x0 = np.array([0.5])
    results = []

    def record(name, error):
        results.append({'instance': name, 'error': float(error)})

    constant = GainSpec('constant', horizon, level=0.7)
    _, model, coeffs = _trivial_problem(constant)
    force = forcing(constant, coeffs)
    psor = solve_psor(coeffs, force, dom, steps)
    penalized = solve_penalized(coeffs, force, dom, PenaltyParams(1e-5, steps))
    residual = complementarity_residual(psor, coeffs, force)['sup']
    bundle = simulate_paths(model, x0, 0.0, 20, 200, seed)
    stats = stop_on_paths(bundle, contact_region(psor, project_gain(constant, 1, 1)))
    record('constant_u', max(np.abs(psor.u).max(), np.abs(penalized.u).max()))
    record('constant_U', np.abs(psor.U - 0.7).max())
    record('constant_residual', residual)
    record('constant_stop_time', np.max(stats.stop_times))
    record('constant_lattice', abs(lattice_oracle_1d(-0.5, 0.3, constant, horizon, 0.5, 4.0, 401, 40) - 0.7))

    decreasing = GainSpec('constant', horizon, level=1.0, time_factor=TimeFactor('affine', horizon, -1.0))
    _, model, coeffs = _trivial_problem(decreasing)
    force = forcing(decreasing, coeffs)
    psor = solve_psor(coeffs, force, dom, steps)
    bundle = simulate_paths(model, x0, 0.0, 20, 200, seed)
    stats = stop_on_paths(bundle, contact_region(psor, project_gain(decreasing, 1, 1)))
    record('decreasing_u', np.abs(psor.u).max())
    record('decreasing_value', abs(stats.value_mean - horizon))

    increasing = GainSpec('constant', horizon, level=1.0, time_factor=TimeFactor('affine', 0.5, 0.5))
    _, model, coeffs = _trivial_problem(increasing, s=0.05)
    force = forcing(increasing, coeffs)
    psor = solve_psor(coeffs, force, dom, steps)
    bundle = simulate_paths(model, x0, 0.0, 20, 200, seed)
    stats = stop_on_paths(bundle, contact_region(psor, project_gain(increasing, 1, 1)))
    record('increasing_stop_time', np.max(np.abs(stats.stop_times - horizon)))

    utils.write_csv(results, ['instance', 'error'], context.emit('trivial.csv'))
    worst = max(row['error'] for row in results)
    return {'trivial_instances': row_for('trivial_instances', worst <= NUM_TOL, worst, 0.0, NUM_TOL)}


TASK_FUNCTIONS = {
    'core': core_task,
    'ladder': ladder_task,
    'fields': fields_task,
    'sweeps': sweeps_task,
    'rules': rules_task,
    'ou': ou_task,
    'trivial': trivial_task,
}


def apply_overrides(config, seed=None, output_dir=None, checks=None):
    """CLI flags override configuration values."""
    config = copy.deepcopy(config)
    if seed is not None:
        config.seed = int(seed)
    if output_dir is not None:
        config.output_dir = output_dir
    if checks:
        unknown = [check_id for check_id in checks if check_id not in CHECK_IDS]
        if unknown:
            raise ValidationError('--check', 'unknown check id {}'.format(unknown[0]))
        config.checks = {check_id: check_id in checks for check_id in CHECK_IDS}
    return config


def run(config, seed=None, output_dir=None, jobs=1, checks=None):
    """
    Run every task with at least one enabled check, in dependency order,
    and write checks.csv and manifest.json to the output directory. A failing
    task is recorded and turns its checks into 'error' rows; independent
    tasks still run.
    """
    config = apply_overrides(config, seed, output_dir, checks)
    config.validate(CHECK_IDS)
    enabled = config.enabled_checks(CHECK_IDS)
    utils.mkdir_p(config.output_dir)
    context = RunContext(config, config.output_dir, jobs)

    manifest = {
        'name': config.name,
        'version': __version__,
        'config_hash': config.hash(),
        'seed': config.seed,
        'started': utils.utc_now(),
        'tasks': {},
        'files': [],
    }

    rows = {}
    for task in TASKS:
        wanted = [check_id for check_id in enabled if CHECK_TASK[check_id] == task]
        if not wanted:
            continue
        utils.debug("Running task {} for checks {}".format(task, ', '.join(wanted)), divider=True)
        context.task = task
        start = time.time()
        try:
            produced = TASK_FUNCTIONS[task](config, context, wanted)
            status = 'ok'
            error = None
            for check_id in wanted:
                rows[check_id] = produced.get(check_id) or error_row(check_id, 'not produced by task')
        except Exception as err:
            logging.warning("Task %s failed: %s", task, err)
            utils.debug(utils.format_last_exception())
            status = 'error'
            error = str(err)
            for check_id in wanted:
                rows[check_id] = error_row(check_id, err)

        manifest['tasks'][task] = {
            'status': status,
            'error': error,
            'checks': wanted,
            'artifacts': list(context.artifacts.get(task, [])),
            'seconds': time.time() - start,
        }

    ordered = [rows[check_id] for check_id in enabled]
    dump_config(config, context.path('config.yml'))
    utils.write_csv(ordered, HEADERS, context.path(CHECKS_FILE))
    manifest['files'] = ['config.yml', CHECKS_FILE]
    utils.write(utils.json_for(manifest), context.path(MANIFEST_FILE))

    failed = [row['check'] for row in ordered if row['status'] != 'pass']
    if failed:
        logging.warning("Checks not passing: %s", ', '.join(failed))
    logging.warning("Wrote %d check rows to %s.", len(ordered), context.path(CHECKS_FILE))
    return manifest, ordered


def passed(rows):
    return all(row['status'] == 'pass' for row in rows)


def load_manifest(path):
    with open(path, 'r', encoding='utf-8') as fh:
        return json.load(fh)


def manifest_files(manifest):
    files = list(manifest.get('files', []))
    for task in manifest.get('tasks', {}).values():
        files.extend(task.get('artifacts', []))
    return files


def _read_checks(path):
    """Rows of a checks table, header-only tables included."""
    with open(path, 'r', encoding='utf-8', newline='') as fh:
        lines = list(csv.reader(fh))
    if len(lines) <= 1:
        return []
    rows = []
    loader = pytablereader.CsvTableFileLoader(path)
    for table in loader.load():
        for values in table.rows:
            rows.append({header: utils.format_cell(value)
                         for header, value in zip(table.headers, values)})
    return rows


def report(manifest_path):
    """
    Check rows of a finished run. Every artifact the manifest lists must
    still exist; an empty manifest yields no rows.
    """
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(manifest_path)
    for name in manifest_files(manifest):
        if not os.path.exists(os.path.join(base, name)):
            raise IntegrityError("artifact {} listed in {} is missing".format(name, manifest_path))
    if CHECKS_FILE not in manifest.get('files', []):
        return []
    return _read_checks(os.path.join(base, CHECKS_FILE))


def sweep(config, seed=None, output_dir=None, jobs=1):
    """
    PSOR solves over every (alpha, n) of the ladder's sweep section, with
    the norm audit per combination and a no-trend test per parameter.
    """
    config = apply_overrides(config, seed, output_dir)
    config.validate(CHECK_IDS)
    section = config.ladder.get('sweep') or {}
    alphas = [float(a) for a in section.get('alphas', [config.alpha])]
    ns = [int(n) for n in section.get('ns', [config.n])]
    grid = config.ladder['grid']
    steps = int(grid['time_steps'])
    utils.mkdir_p(config.output_dir)

    results = []
    for alpha, n in itertools.product(alphas, ns):
        spec, model, coeffs, gain = _problem_parts(config, alpha, n)
        dom = DomainSpec(float(config.ladder['radius']), int(grid['nodes']), n)
        field = solve_psor(coeffs, forcing(spec.gain, coeffs), dom, steps)
        mu = build_measure(spec.covariance, n)
        U0 = float(field.probe(config.x0[None, :n], 0)[0])
        for p in [float(p) for p in config.ladder['norm_p']]:
            audit = norm_audit(field, gain, mu, p)
            results.append({
                'alpha': alpha, 'n': n, 'p': p, 'U0': U0,
                'norm_u': audit['u'].value, 'norm_grad': audit['grad'].value,
                'norm_time': audit['time'].value, 'bound': audit['bound'],
                'within_bound': audit['within_bound'],
            })
        utils.debug("Sweep point alpha={} n={}: U0={}".format(alpha, n, U0))

    path = os.path.join(config.output_dir, 'sweep.csv')
    utils.write_csv(results, SWEEP_RESULT_HEADERS, path)

    ok = all(row['within_bound'] for row in results)
    worst = max(results, key=lambda row: row['norm_u'] / row['bound'])
    trends = []
    for p in sorted(set(row['p'] for row in results)):
        chosen = [row for row in results if row['p'] == p]
        for parameter, transform in (('alpha', math.log), ('n', float)):
            by_value = {}
            for row in chosen:
                if math.isfinite(row[parameter]):
                    by_value.setdefault(row[parameter], []).append(row)
            params = sorted(by_value)
            series = {name: [float(np.mean([row[column] for row in by_value[v]])) for v in params]
                      for name, column in (('Du', 'norm_grad'), ('du/dt', 'norm_time'))}
            trends.extend(_trend_rows(parameter, [transform(v) for v in params], p, series))
    utils.write_csv(trends, TREND_HEADERS, os.path.join(config.output_dir, 'norm_trend.csv'))

    rows = [row_for('norm_audit', ok, worst['norm_u'], worst['bound'], 0.0)]
    utils.write_csv(rows, HEADERS, os.path.join(config.output_dir, CHECKS_FILE))
    return results, rows
