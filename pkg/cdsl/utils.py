#!/usr/bin/env python

"""
Shared helpers: the error hierarchy, logger setup, and plain-text writers used by every stage.
"""
import os
import sys
import csv
import json
from typing import Iterable, List, Sequence, Union

import dill
import numpy as np
from loguru import logger


########################################################################
###   GLOBALS
########################################################################

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


########################################################################
###   EXCEPTIONS
########################################################################


class CDSError(Exception):
    exit_code = EXIT_NUMERIC

    def __init__(self, value=""):
        super(CDSError, self).__init__(value)
        self.value = value

    def __str__(self):
        return str(self.value)


class InvalidConfig(CDSError, ValueError):
    exit_code = EXIT_CONFIG


class IoError(CDSError, OSError):
    exit_code = EXIT_IO


class ParseError(IoError):
    def __init__(self, value="", line_number=None, path=None):
        if line_number is not None:
            value = f"{path or '<input>'}:{line_number}: {value}"
        super(ParseError, self).__init__(value)
        self.line_number = line_number
        self.path = path


class NumericError(CDSError, ArithmeticError):
    pass


class NormTooSmall(NumericError):
    pass


class InvalidTemperature(NumericError, ValueError):
    pass


class InfiniteLoss(NumericError):
    pass


class InvalidDistribution(NumericError, ValueError):
    pass


class DimensionMismatch(CDSError, ValueError):
    pass


class IndexOutOfRange(CDSError, IndexError):
    pass


class CacheMismatch(CDSError):
    pass


class EmptyDomain(CDSError):
    pass


class EmptyBatch(CDSError):
    pass


class EmptyReference(CDSError):
    pass


########################################################################
###   LOGGING
########################################################################

TIMED_FORMAT = "{time:YYYY-MM-DD-HH:mm:ss.SS} | " \
               "<magenta>{file: >18} | </magenta>" \
               "<cyan>{function: <24} | </cyan>" \
               "<level>{level: <4}</level> | " \
               "<level>{message}</level>"
SIMPLE_FORMAT = "<level>{message}</level>"
logger.level("RES", no=25)

# CDS_LOG values accepted by the CLI
ENV_LOG_LEVELS = {"error": "ERROR", "info": "INFO", "debug": "DEBUG"}


def setup_logger(loglevel="INFO", timed=True, log_file=None, screen_out=sys.stdout):
    """
    Configure Loguru to log to stdout and logfile.
    """
    logger.remove()
    config = {
        "handlers": [
            {
                "sink": sink_obj,
                "format": TIMED_FORMAT if timed else SIMPLE_FORMAT,
                "level": loglevel,
            }
            for sink_obj in [screen_out, log_file] if sink_obj]
    }
    logger.configure(**config)
    logger.enable("cdsl")


def log_level_from_env(default="INFO"):
    raw = os.environ.get("CDS_LOG")
    if raw is None or raw == "":
        return default
    if raw.lower() not in ENV_LOG_LEVELS:
        raise InvalidConfig(f"CDS_LOG must be one of {sorted(ENV_LOG_LEVELS)}, got {raw!r}")
    return ENV_LOG_LEVELS[raw.lower()]


########################################################################
###   TEXT OUTPUT
########################################################################

def fmt_float(value):
    """shortest round-trip decimal form; empty for None"""
    if value is None:
        return ""
    return repr(float(value))


def config_comment(config_dict):
    return "# config=" + json.dumps(config_dict, sort_keys=True, separators=(",", ":"))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()):
    """
    Write LF-terminated UTF-8 CSV. Float cells are formatted with fmt_float;
    comment lines are written first, each prefixed with '#'.
    """
    with open(path, "w", encoding="utf-8", newline="") as output_h:
        for comment in comments:
            output_h.write(comment if comment.startswith("#") else "# " + comment)
            output_h.write("\n")
        writer = csv.writer(output_h, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(cell) if isinstance(cell, float) else
                             ("" if cell is None else cell) for cell in row])


def read_csv_rows(path):
    """
    :return: (header, [(line_number, row), ..]) with leading '#' lines skipped
    """
    if not os.path.isfile(path):
        raise IoError(f"File not found: {path}")
    header = None
    rows = []
    with open(path, encoding="utf-8", newline="") as input_h:
        for line_number, line in enumerate(input_h, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            if header is None and line.startswith("#"):
                continue
            row = next(csv.reader([line]))
            if header is None:
                header = row
            else:
                rows.append((line_number, row))
    if header is None:
        raise ParseError("missing header", line_number=1, path=path)
    return header, rows


def write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as output_h:
        json.dump(payload, output_h, indent=2, sort_keys=True)
        output_h.write("\n")


def read_json(path):
    if not os.path.isfile(path):
        raise IoError(f"File not found: {path}")
    with open(path, encoding="utf-8") as input_h:
        try:
            return json.load(input_h)
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line_number=e.lineno, path=path)


def median(values: List[float]) -> Union[float, None]:
    """median of the values that are not None; None when there are none"""
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(np.median(values))


# following the solution using dill: https://stackoverflow.com/a/24673524
def run_dill_encoded(payload):
    fun, args = dill.loads(payload)
    return fun(*args)
