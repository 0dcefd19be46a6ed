"""Kernel backend selection: numba-jitted loops or pure-numpy fallback.

The hot kernels in this package come in two flavours. The numba flavour
compiles explicit loops whose accumulation order is pinned (chunk index,
then element index), which is what the determinism contracts rely on.
The numpy flavour is a vectorized fallback that needs no compiler and is
what you get when numba is unavailable or explicitly switched off.

Selection, in order of precedence:
  1. ``set_backend("numba" | "numpy")`` at runtime,
  2. the ``FLATDECODE_BACKEND`` environment variable,
  3. "numba" if importable, else "numpy".
"""

import os

import numpy as np


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


HAVE_NUMBA = _numba_available()

if HAVE_NUMBA:
    from numba import njit, prange
else:
    def njit(*args, **kwargs):
        # decorator stub so modules can define kernels unconditionally
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f
        return wrap

    prange = range


_VALID = ("numba", "numpy")
_backend = None


def _env_backend() -> str:
    name = os.environ.get("FLATDECODE_BACKEND", "").strip().lower()
    if name in _VALID:
        if name == "numba" and not HAVE_NUMBA:
            raise RuntimeError("FLATDECODE_BACKEND=numba but numba is not importable")
        return name
    if name:
        raise RuntimeError(f"FLATDECODE_BACKEND must be one of {_VALID}, got {name!r}")
    return "numba" if HAVE_NUMBA else "numpy"


def active_backend() -> str:
    """Name of the backend kernels will run on: "numba" or "numpy"."""
    global _backend
    if _backend is None:
        _backend = _env_backend()
    return _backend


def set_backend(name: str) -> str:
    """Force a backend; returns the previous one. Pass None to re-read the env."""
    global _backend
    prev = active_backend()
    if name is None:
        _backend = _env_backend()
        return prev
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name
    return prev


def use_numba() -> bool:
    return active_backend() == "numba"


def worker_count() -> int:
    """Worker threads for parallel kernels; FLATDECODE_WORKERS overrides."""
    env = os.environ.get("FLATDECODE_WORKERS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("FLATDECODE_WORKERS must be >= 1")
        return n
    return os.cpu_count() or 1


def apply_worker_count() -> int:
    """Pin numba's thread pool to worker_count(); no-op on the numpy backend."""
    n = worker_count()
    if HAVE_NUMBA:
        import numba
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    return n


F32 = np.float32
F64 = np.float64
