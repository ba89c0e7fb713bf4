"""Global float precision switch.

32-bit is the default working mode; 64-bit tightens oracle comparisons in the
gradient-check suites. Selected once per process via set_precision() or the
PMTK_PRECISION environment variable ({f32, f64}), or temporarily via use().
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from .errors import ConfigError

_NAMES = {"f32": np.float32, "f64": np.float64}
_current = "f32"


def set_precision(name: str) -> None:
    global _current
    if name not in _NAMES:
        raise ConfigError(f"precision must be one of {sorted(_NAMES)}, got {name!r}")
    _current = name


def precision() -> str:
    return _current


def dtype() -> np.dtype:
    return np.dtype(_NAMES[_current])


def is_double() -> bool:
    return _current == "f64"


@contextlib.contextmanager
def use(name: str):
    """Temporarily switch precision (affects tensors created inside)."""
    previous = _current
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


_env = os.environ.get("PMTK_PRECISION")
if _env:
    set_precision(_env)
