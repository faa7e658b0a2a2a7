"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``CPMGEE_PURE_PYTHON=1`` in the environment to force the fallback.
Both implementations stay importable (``compiled`` may be ``None``) so the
benchmark and the tests can compare them directly.
"""

import os

from . import _kernels_py as python

try:
    from . import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not os.environ.get("CPMGEE_PURE_PYTHON"):
    _impl = compiled
    BACKEND = "compiled"
else:
    _impl = python
    BACKEND = "python"

tridiag_factor = _impl.tridiag_factor
tridiag_solve = _impl.tridiag_solve
expected_information = _impl.expected_information
