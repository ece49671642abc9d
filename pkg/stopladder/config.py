"""
Experiment configurations: YAML documents with the sections problem,
ladder, checks, seed and output_dir.
"""

import copy
import math

import numpy as np
import yaml

from . import utils
from .errors import ScheduleError, StopLadderError, ValidationError
from .models import (
    CovarianceSpec, DiffusionSpec, GainSpec, OperatorSpec, ProblemSpec, TimeFactor)
from .obstacle import MAX_GRID_DIM
from .sde import SCHEDULE_RULES, check_schedule, schedule_values

DEFAULT_OUTPUT_DIR = 'results'

# Ladder defaults, overridden per key by the configuration.
LADDER_DEFAULTS = {
    'alpha': math.inf,
    'n': 1,
    'alphas': [1, 2, 4, 8, 16, 32, 64, 128, 256],
    'ns': [],
    'radius': 5.0,
    'radii': [],
    'epsilon': 1e-5,
    'epsilons': [],
    'theta': 1.0,
    'grid': {'nodes': 201, 'time_steps': 100, 'refinement_nodes': 51, 'refinement_steps': 25},
    'probes': [],
    'x0': None,
    'paths': {'count': 10000, 'steps': 100, 'study_count': 2000, 'study_steps': 50},
    'lattice': {'nodes': 2001, 'steps': 400},
    'lsmc': {'degree': 3, 'count': 20000},
    'sigma_times': [],
    'norm_p': [2, 4],
    'quadrature_nodes': 32,
    'delta': None,
    'jobs': 1,
}


def _float(value):
    # YAML spells infinity '.inf'; accept the string 'inf' too.
    if isinstance(value, str) and value.strip().lower() in ('inf', '+inf', 'infinity'):
        return math.inf
    return float(value)


def _require(section, key, where):
    if key not in section:
        raise ValidationError('{}.{}'.format(where, key), 'is required')
    return section[key]


def _merge(defaults, overrides):
    merged = copy.deepcopy(defaults)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_problem(section):
    """ProblemSpec from the 'problem' section."""
    horizon = float(_require(section, 'horizon', 'problem'))

    op = _require(section, 'operator', 'problem')
    operator = OperatorSpec(op.get('kind', 'diagonal'), _require(op, 'entries', 'problem.operator'))

    cov = _require(section, 'covariance', 'problem')
    covariance = CovarianceSpec(_require(cov, 'lambdas', 'problem.covariance'), cov.get('n_master'))

    diff = section.get('diffusion', {'kind': 'constant', 'gamma': [0.0]})
    diffusion = DiffusionSpec(diff.get('kind', 'constant'), diff.get('gamma', [0.0]),
                              diff.get('slope'), diff.get('scale', 1.0))

    gain = _require(section, 'gain', 'problem')
    factor = gain.get('time_factor', {})
    time_factor = TimeFactor(factor.get('kind', 'one'), factor.get('h0', 1.0),
                             factor.get('h1', 0.0), factor.get('rate', 0.0))
    gain_spec = GainSpec(
        _require(gain, 'family', 'problem.gain'), horizon, gain.get('ell'),
        gain.get('strike', 0.0), gain.get('cap'), gain.get('level', 1.0),
        time_factor, gain.get('bounds'))

    schedule = dict(section.get('schedule', {'rule': 'inverse', 'scale': 1.0}))
    if schedule.get('rule', 'inverse') not in SCHEDULE_RULES:
        raise ValidationError('problem.schedule.rule', 'must be one of {}'.format(', '.join(SCHEDULE_RULES)))
    return ProblemSpec(operator, covariance, diffusion, gain_spec, schedule)


class ExperimentConfig(object):

    def __init__(self, problem, ladder=None, checks=None, seed=0,
                 output_dir=DEFAULT_OUTPUT_DIR, name=None, ou=None):
        self.problem = copy.deepcopy(problem)
        self.ladder = _merge(LADDER_DEFAULTS, ladder)
        self.checks = dict(checks or {})
        self.seed = int(seed)
        self.output_dir = output_dir
        self.name = name
        self.ou = copy.deepcopy(ou)
        self._spec = None

    @property
    def spec(self):
        if self._spec is None:
            self._spec = build_problem(self.problem)
        return self._spec

    @property
    def alpha(self):
        return _float(self.ladder['alpha'])

    @property
    def n(self):
        return int(self.ladder['n'])

    @property
    def x0(self):
        x0 = self.ladder.get('x0')
        out = np.zeros(self.spec.n_master)
        if x0 is not None:
            values = np.ravel(np.asarray(x0, dtype=float))
            out[:values.size] = values
        return out

    @property
    def probes(self):
        return np.atleast_2d(np.asarray(self.ladder['probes'], dtype=float)) if self.ladder['probes'] else None

    def enabled(self, check_id):
        return bool(self.checks.get(check_id, False))

    def enabled_checks(self, known):
        return [check_id for check_id in known if self.enabled(check_id)]

    def validate(self, known_checks=None):
        """Raise ValidationError naming the first offending key."""
        try:
            spec = self.spec
        except ValidationError:
            raise
        except StopLadderError as error:
            raise ValidationError('problem', str(error))

        try:
            check_schedule(schedule_values(spec))
        except ScheduleError as error:
            raise ValidationError('problem.schedule', str(error))

        ladder = self.ladder
        if not self.alpha > 0:
            raise ValidationError('ladder.alpha', 'must be positive (or .inf)')
        for alpha in ladder['alphas']:
            if not _float(alpha) > 0:
                raise ValidationError('ladder.alphas', 'every alpha must be positive')
        if not 1 <= self.n <= spec.n_master:
            raise ValidationError('ladder.n', 'must lie in 1..{}'.format(spec.n_master))
        for n in ladder['ns']:
            if not 1 <= int(n) <= spec.n_master:
                raise ValidationError('ladder.ns', 'every n must lie in 1..{}'.format(spec.n_master))
        if not float(ladder['radius']) > 0:
            raise ValidationError('ladder.radius', 'must be positive')

        radii = [float(r) for r in ladder['radii']]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValidationError('ladder.radii', 'must be strictly increasing')
        epsilons = [float(e) for e in ladder['epsilons']]
        if any(e <= 0 for e in epsilons) or any(b >= a for a, b in zip(epsilons, epsilons[1:])):
            raise ValidationError('ladder.epsilons', 'must be positive and strictly decreasing')
        if not float(ladder['epsilon']) > 0:
            raise ValidationError('ladder.epsilon', 'must be positive')
        if not 0.5 <= float(ladder['theta']) <= 1.0:
            raise ValidationError('ladder.theta', 'must lie in [1/2, 1]')

        grid = ladder['grid']
        for key in ('nodes', 'time_steps'):
            if int(grid[key]) < 3:
                raise ValidationError('ladder.grid.{}'.format(key), 'must be at least 3')
        paths = ladder['paths']
        for key in ('count', 'steps'):
            if int(paths[key]) < 1:
                raise ValidationError('ladder.paths.{}'.format(key), 'must be at least 1')

        probes = self.probes
        if probes is not None:
            smallest = min([float(ladder['radius'])] + radii)
            if np.any(np.linalg.norm(probes, axis=1) >= smallest):
                raise ValidationError('ladder.probes', 'probes must lie inside the smallest ball')
        for sigma in ladder['sigma_times']:
            if not 0 <= float(sigma) <= spec.horizon:
                raise ValidationError('ladder.sigma_times', 'cut times must lie in [0, T]')
        for p in ladder['norm_p']:
            if not float(p) >= 1:
                raise ValidationError('ladder.norm_p', 'exponents must be >= 1')

        if known_checks is not None:
            for check_id in self.checks:
                if check_id not in known_checks:
                    raise ValidationError('checks.{}'.format(check_id), 'unknown check id')
            grid_checks = {'obstacle_agreement', 'complementarity', 'value_bounds', 'spatial_lipschitz',
                           'penalty_convergence', 'domain_stabilization', 'grid_convergence',
                           'norm_audit', 'optimal_rule', 'perturbed_rules', 'martingale'}
            if self.n > MAX_GRID_DIM and any(self.enabled(c) for c in grid_checks):
                raise ValidationError('ladder.n', 'grid checks need n <= {}'.format(MAX_GRID_DIM))

        if self.ou is not None:
            if spec.operator.kind != 'diagonal':
                raise ValidationError('problem.operator.kind', 'the symmetric case needs a diagonal operator')
        utils.debug("Configuration {} validated".format(self.name or ''))
        return self

    def to_object(self):
        out = {
            'problem': copy.deepcopy(self.problem),
            'ladder': copy.deepcopy(self.ladder),
            'checks': dict(self.checks),
            'seed': self.seed,
            'output_dir': self.output_dir,
        }
        if self.name is not None:
            out['name'] = self.name
        if self.ou is not None:
            out['ou'] = copy.deepcopy(self.ou)
        return out

    def hash(self):
        return utils.stable_hash(self.to_object())


def parse_config(document):
    if not isinstance(document, dict):
        raise ValidationError('<root>', 'configuration must be a mapping')
    return ExperimentConfig(
        _require(document, 'problem', '<root>'),
        document.get('ladder'),
        document.get('checks'),
        document.get('seed', 0),
        document.get('output_dir', DEFAULT_OUTPUT_DIR),
        document.get('name'),
        document.get('ou'))


def load_config(path):
    with open(path, 'r', encoding='utf-8') as fh:
        try:
            document = yaml.safe_load(fh)
        except yaml.YAMLError as error:
            raise ValidationError(path, 'not valid YAML: {}'.format(error))
    config = parse_config(document)
    if config.name is None:
        config.name = path.rsplit('/', 1)[-1].rsplit('.', 1)[0]
    return config


def dump_config(config, destination=None):
    text = yaml.safe_dump(config.to_object(), default_flow_style=False, sort_keys=True)
    if destination is not None:
        utils.write(text, destination)
    return text
