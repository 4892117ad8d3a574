"""Worker-thread control.

``TAILFORGE_THREADS`` caps the number of worker threads used for
embarrassingly parallel evaluation. Work is always split into the same
fixed-size chunks and concatenated in chunk order, so results are
bit-identical for every thread count. BLAS itself is pinned to one thread
inside :func:`blas_single_thread` because its internal reductions are not
guaranteed to be order-stable across thread counts.
"""

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits

from .exceptions import ConfigError

ENV_VAR = "TAILFORGE_THREADS"


def worker_threads():
    raw = os.environ.get(ENV_VAR, "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def map_chunks(fn, n, chunk):
    """``[fn(start, stop) for each chunk]`` over ``range(n)``, in order."""
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    threads = min(worker_threads(), len(bounds))
    if threads <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


@contextlib.contextmanager
def blas_single_thread():
    with threadpool_limits(limits=1):
        yield
