"""Common helper functions used across the tunekit modules."""

import json
import os
import re
import sys

import numpy as np
from loguru import logger as log

from .exceptions import DatasetError


LOG_LEVELS = {
    "error": "ERROR",
    "info": "INFO",
    "debug": "DEBUG",
}


def setup_logging(verbose=False):
    """Configure the loguru sink on stderr from the `TUNEKIT_LOG` variable.

    Library code never touches the sinks, this is meant to be called once by
    the command line entry point.

    Parameters
    ----------
    verbose : bool, optional
        If set to True the level is forced to `TRACE`, by default False.

    Returns
    -------
    str
        The name of the level that was configured.
    """
    level = LOG_LEVELS.get(os.environ.get("TUNEKIT_LOG", "info").lower(), "INFO")
    if verbose:
        level = "TRACE"
    log.remove()
    log.add(sys.stderr, level=level)
    return level


def round_half_away(values):
    """Round to the nearest integer, ties going away from zero.

    Parameters
    ----------
    values : float or array-like

    Returns
    -------
    numpy.ndarray or float
        Rounded values (still as floats), same shape as the input.
    """
    arr = np.asarray(values, dtype=np.float64)
    rounded = np.sign(arr) * np.floor(np.abs(arr) + 0.5)
    if rounded.ndim == 0:
        return float(rounded)
    return rounded


def format_percent(part, total):
    """Format a ratio as a percentage string with two decimals.

    Parameters
    ----------
    part : int or float
    total : int or float

    Returns
    -------
    str
        E.g. `0.23%` or `100%` if `part` equals `total`.
    """
    if total == 0:
        return "0.00%"
    if part == total:
        return "100%"
    return f"{100.0 * part / total:.2f}%"


def format_trainable(trainable, total, unit=1e6):
    """Format a trainable / total count pair, e.g. `17.89 (0.23%)`.

    Parameters
    ----------
    trainable : int or float
        Number of trainable values.
    total : int or float
        Total number of values.
    unit : float, optional
        The divisor applied to the trainable count, by default 1e6 (millions).

    Returns
    -------
    str
    """
    return f"{trainable / unit:.2f} ({format_percent(trainable, total)})"


def split_limit_suffix(path):
    """Split a dataset path like `data.jsonl#5` into path and record limit.

    Parameters
    ----------
    path : str

    Returns
    -------
    (str, int or None)
        The plain path and the number of records to take (None for all).
    """
    match = re.match(r"^(.*)#(\d+)$", str(path))
    if not match:
        return str(path), None
    return match.group(1), int(match.group(2))


def read_jsonl(path):
    """Read a JSONL file and return its objects along with their line numbers.

    Parameters
    ----------
    path : str

    Returns
    -------
    list(tuple(int, dict))

    Raises
    ------
    DatasetError
        Raised for lines that are not valid JSON objects, naming the line.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as infile:
        for lineno, line in enumerate(infile, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                msg = f"Malformed JSON in [{path}] line {lineno}: {err}"
                log.error(msg)
                raise DatasetError(msg) from err
            if not isinstance(obj, dict):
                msg = f"Line {lineno} of [{path}] is not a JSON object"
                log.error(msg)
                raise DatasetError(msg)
            rows.append((lineno, obj))
    return rows


def write_jsonl(path, objects):
    """Write a sequence of dicts as JSONL, one object per line.

    Parameters
    ----------
    path : str
    objects : iterable(dict)

    Returns
    -------
    int
        The number of lines written.
    """
    count = 0
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as outfile:
        for obj in objects:
            outfile.write(json.dumps(obj, ensure_ascii=False) + "\n")
            count += 1
    log.debug("Wrote {} lines to [{}]", count, path)
    return count


def str2bool(value):
    """Convert command line strings like `true` / `false` into booleans.

    Parameters
    ----------
    value : str or bool

    Returns
    -------
    bool

    Raises
    ------
    ValueError
        Raised for anything not resembling a boolean.
    """
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("true", "1", "yes", "y"):
        return True
    if lowered in ("false", "0", "no", "n"):
        return False
    raise ValueError(f"Not a boolean value: '{value}'")


def slugify(text, max_len=48):
    """Turn arbitrary text into a file name friendly string.

    Parameters
    ----------
    text : str
    max_len : int, optional
        Maximum length of the result, by default 48.

    Returns
    -------
    str
        Lower-case alphanumerics separated by single dashes.
    """
    slug = re.sub(r"[^a-z0-9]+", "-", str(text).lower()).strip("-")
    return slug[:max_len].rstrip("-") or "empty"
