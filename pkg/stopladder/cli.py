#!/usr/bin/env python

"""stopladder runs the approximation ladder of an optimal stopping problem
for a Hilbert-space diffusion and checks every rung.

Usage:
  stopladder validate --config FILE [--check ID]... [--debug]
  stopladder run --config FILE [--seed SEED] [--out DIR] [--jobs N] [--check ID]... [--debug]
  stopladder report MANIFEST [--format FORMAT] [--output OUTFILE] [--debug]
  stopladder sweep --config FILE [--seed SEED] [--out DIR] [--jobs N] [--debug]
  stopladder (-h | --help)
  stopladder --version

Options:
  -h --help                 Show this message.
  --version                 Show the version.
  -c --config=FILE          YAML experiment configuration.
  -s --seed=SEED            Override the master seed.
  -o --out=DIR              Override the output directory.
  -j --jobs=N               Worker threads for sweeps and path blocks.
  --check=ID                Run only this check (repeatable).
  -f --format=FORMAT        csv, json-lines or markdown. [default: csv]
  --output=OUTFILE          Write the report here. (Defaults to stdout.)
  -d --debug                Print debug output.

Notes:
  The exit code is 0 exactly when every enabled check passes. Invalid
  configurations exit with 2 and name the offending key.
"""

from . import stopladder
from . import utils
from . import __version__
from .config import load_config
from .errors import IntegrityError, ValidationError
from .utils import smart_open

import csv
import docopt
import json
import logging
import sys

import pytablewriter

FORMATS = ('csv', 'json-lines', 'markdown')


def to_csv(results, out_filename):
    with smart_open(out_filename) as out_file:
        writer = csv.writer(out_file, lineterminator='\n')

        writer.writerow(stopladder.HEADERS)

        for result in results:
            row = [utils.format_cell(result[header]) for header in stopladder.HEADERS]
            writer.writerow(row)

        if out_file is not sys.stdout:
            logging.warning("Wrote results to %s.", out_filename)


def to_json_lines(results, out_filename):
    with smart_open(out_filename) as out_file:
        for result in results:
            record = {header: result[header] for header in stopladder.HEADERS}
            out_file.write(json.dumps(record, sort_keys=True, default=utils.format_value) + '\n')

        if out_file is not sys.stdout:
            logging.warning("Wrote results to %s.", out_filename)


def to_markdown(results, out_filename):
    table = [
        [" %s" % utils.format_cell(result[header]) for header in stopladder.HEADERS]
        for result in results
    ]

    utils.debug("Printing Markdown...", divider=True)
    with smart_open(out_filename) as out_file:
        writer = pytablewriter.MarkdownTableWriter()

        writer.headers = stopladder.HEADERS
        writer.value_matrix = table
        writer.stream = out_file

        writer.write_table()


def _jobs(args, config):
    if args['--jobs'] is not None:
        return int(args['--jobs'])
    return int(config.ladder.get('jobs', 1))


def main():
    args = docopt.docopt(__doc__, version=__version__)
    utils.configure_logging(args['--debug'])

    try:
        if args['report']:
            out_format = args['--format']
            if out_format not in FORMATS:
                raise ValidationError('--format', 'must be one of {}'.format(', '.join(FORMATS)))
            results = stopladder.report(args['MANIFEST'])

            if out_format == 'json-lines':
                to_json_lines(results, args['--output'])
            elif out_format == 'markdown':
                to_markdown(results, args['--output'])
            else:
                to_csv(results, args['--output'])
            sys.exit(0 if stopladder.passed(results) else 1)

        config = load_config(args['--config'])
        seed = args['--seed']
        checks = args['--check'] or None

        if args['validate']:
            config = stopladder.apply_overrides(config, checks=checks)
            config.validate(stopladder.CHECK_IDS)
            print("{}: valid, {} checks enabled".format(
                config.name, len(config.enabled_checks(stopladder.CHECK_IDS))))
            sys.exit(0)

        if args['sweep']:
            _, rows = stopladder.sweep(config, seed, args['--out'], _jobs(args, config))
            sys.exit(0 if stopladder.passed(rows) else 1)

        _, rows = stopladder.run(config, seed, args['--out'], _jobs(args, config), checks)
        sys.exit(0 if stopladder.passed(rows) else 1)

    except ValidationError as error:
        logging.error("Invalid configuration: %s", error)
        sys.exit(2)
    except IntegrityError as error:
        logging.error("%s", error)
        sys.exit(3)


if __name__ == '__main__':
    main()
