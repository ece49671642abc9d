#!/usr/bin/env python

import contextlib
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
import traceback

import numpy as np
import pytz


def format_last_exception():
    """Traceback of the exception being handled, for debug logs."""
    return "".join(traceback.format_exception(*sys.exc_info()))


def mkdir_p(path):
    os.makedirs(path, exist_ok=True)


def json_for(object):
    return json.dumps(object, sort_keys=True,
                      indent=2, default=format_value)


def write(content, destination, binary=False):
    parent = os.path.dirname(destination)
    if parent != "":
        mkdir_p(parent)

    if binary:
        with open(destination, "wb") as out_file:
            out_file.write(content)
    else:
        with open(destination, "w", encoding="utf-8", newline="") as out_file:
            out_file.write(content)


def format_value(obj):
    """Fallback serializer for json_for: dates, numpy scalars and arrays."""
    if isinstance(obj, datetime.date):
        return obj.isoformat()
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, str):
        return obj
    else:
        return None


def format_cell(value):
    # repr() of a float is the shortest round-tripping form, which keeps
    # reruns byte-identical.
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ''
    return str(value)


def write_csv(rows, headers, destination):
    """Write dict rows with a fixed header order."""
    parent = os.path.dirname(destination)
    if parent != "":
        mkdir_p(parent)

    with open(destination, 'w', encoding='utf-8', newline='') as out_file:
        writer = csv.writer(out_file, lineterminator='\n')
        writer.writerow(headers)
        for row in rows:
            writer.writerow([format_cell(row.get(header)) for header in headers])

    debug("Wrote {} rows to {}".format(len(rows), destination))
    return destination


def utc_now():
    return datetime.datetime.now(pytz.utc)


def stable_hash(object):
    canonical = json.dumps(object, sort_keys=True, default=format_value)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def task_seed(master_seed, task_id):
    """Fan a master seed out to a task without coupling tasks together."""
    digest = hashlib.sha256("{}:{}".format(master_seed, task_id).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') % (2 ** 63)


# Configure logging level, so logging.debug can hinge on --debug.
def configure_logging(debug=False):
    if debug:
        log_level = logging.DEBUG
    else:
        log_level = logging.WARNING

    logging.basicConfig(format='%(message)s', level=log_level)


def debug(message, divider=False):
    if divider:
        logging.debug("\n-------------------------\n")

    if message:
        logging.debug("%s\n" % message)


@contextlib.contextmanager
def smart_open(filename=None):
    """
    Context manager that can handle writing to a file or stdout

    Adapted from: https://stackoverflow.com/a/17603000
    """
    if filename is None:
        fh = sys.stdout
    else:
        fh = open(filename, 'w', encoding='utf-8', newline='')

    try:
        yield fh
    finally:
        if fh is not sys.stdout:
            fh.close()
