"""Hot inner loops, compiled when available.

The Cython extension is used if it was built; otherwise the NumPy fallback is
selected. Set ``CROSSLABEL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

if os.environ.get("CROSSLABEL_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "python" if _impl is _fallback else "cython"
sequential_code_sweep = _impl.sequential_code_sweep
atom_block_sweep = _impl.atom_block_sweep


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
