"""Select the compiled kernels when available, else the pure-Python ones.

Set ``PASSVP_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("PASSVP_PURE_PYTHON", "") not in ("", "0"):
    from . import _pyspeedups as _impl
else:
    try:
        from . import _speedups as _impl
    except ImportError:  # extension not built
        from . import _pyspeedups as _impl

EventQueue = _impl.EventQueue
byte_sum32 = _impl.byte_sum32
find_range = _impl.find_range
IMPLEMENTATION = _impl.IMPLEMENTATION

__all__ = ["EventQueue", "byte_sum32", "find_range", "IMPLEMENTATION"]
