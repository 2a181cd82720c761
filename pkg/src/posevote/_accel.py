"""Numba acceleration shim.

Hot kernels are written twice: a loop form compiled with numba's ``@njit``
and a vectorized pure-NumPy form.  The loop form is used when numba is
importable and the environment variable ``POSEVOTE_NO_NUMBA`` is unset (or
"0"); otherwise the NumPy form takes over.  ``USING_NUMBA`` records which
path is active so benchmarks and run metadata can report it.

Run ``python benchmarks/kernel_bench.py`` to time the two paths against
each other.
"""

import os

_disabled = os.environ.get("POSEVOTE_NO_NUMBA", "").strip() not in ("", "0")

if not _disabled:
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dep normally
        USING_NUMBA = False
else:
    USING_NUMBA = False

if not USING_NUMBA:

    def njit(*args, **kwargs):  # noqa: D103 - mirror numba.njit's call forms
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap
