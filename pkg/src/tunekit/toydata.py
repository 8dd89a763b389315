"""Deterministic toy tasks for training tests and benchmarks."""

import numpy as np

from .template import StandardRecord

COPY_ALPHABET = "abcdefgh"


def copy_task(n_records, seed=0, min_len=4, max_len=8, alphabet=COPY_ALPHABET):
    """Byte-copy records: the response repeats the query string.

    Parameters
    ----------
    n_records : int
    seed : int, optional
    min_len, max_len : int, optional
        Inclusive range of the string lengths.
    alphabet : str, optional

    Returns
    -------
    list(StandardRecord)
        Records with an empty system prompt to keep them short.
    """
    rng = np.random.default_rng([seed, 1])
    records = []
    for _ in range(n_records):
        length = int(rng.integers(min_len, max_len + 1))
        picks = rng.integers(0, len(alphabet), size=length)
        text = "".join(alphabet[int(i)] for i in picks)
        records.append(StandardRecord(query=text, response=text, system=""))
    return records


def _operands(rng):
    return int(rng.integers(10, 100)), int(rng.integers(10, 100))


def addition_task(n_records, seed=0):
    """Two-digit addition questions: `Calculate a+b` / `The answer is c.`."""
    rng = np.random.default_rng([seed, 2])
    records = []
    for _ in range(n_records):
        a, b = _operands(rng)
        records.append(
            StandardRecord(
                query=f"Calculate {a}+{b}",
                response=f"The answer is {a + b}.",
                system="",
            )
        )
    return records


def preference_task(n_records, seed=0):
    """Addition questions with a wrong answer as the rejected response."""
    rng = np.random.default_rng([seed, 3])
    records = []
    for _ in range(n_records):
        a, b = _operands(rng)
        offset = int(rng.integers(1, 10)) * (1 if rng.random() < 0.5 else -1)
        records.append(
            StandardRecord(
                query=f"Calculate {a}+{b}",
                response=f"The answer is {a + b}.",
                rejected_response=f"The answer is {a + b + offset}.",
                system="",
            )
        )
    return records


TASKS = {"copy": copy_task, "addition": addition_task, "preference": preference_task}
