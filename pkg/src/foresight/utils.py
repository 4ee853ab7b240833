"""Small shared helpers."""

import os

from .errors import ParameterError

THREADS_ENV = "FORESIGHT_THREADS"


def worker_count() -> int:
    """Worker cap for parallel sections.

    Reads FORESIGHT_THREADS; unset or empty means all available cores.
    """
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ParameterError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n
