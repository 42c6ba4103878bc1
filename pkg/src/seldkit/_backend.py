"""Select the compiled kernels when available, else the NumPy fallback.

Set ``SELDKIT_BACKEND=python`` to force the fallback.
"""
import os

from seldkit import _fallback

if os.environ.get("SELDKIT_BACKEND", "").lower() == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from seldkit import _core as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

correlate_bank = _impl.correlate_bank
interval_max = _impl.interval_max

__all__ = ["BACKEND", "correlate_bank", "interval_max"]
