"""Kernel backend selection.

The compiled extension is used when it imports; setting ``RESIST_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names whichever was chosen.
"""
from __future__ import annotations

import os

from . import _fallback

fallback = _fallback

if os.environ.get("RESIST_PURE_PYTHON", "") not in ("", "0"):
    kernels = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        kernels = _fallback
        BACKEND = "python"

compiled = kernels if BACKEND == "cython" else None
