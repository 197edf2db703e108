"""Kernel backend selection.

The compiled extension is preferred when it imports cleanly; otherwise the
NumPy reference takes over.  Both produce equal results, so the choice only
affects speed.  Set ``SHJB_FORCE_PYTHON=1`` to insist on the fallback (the
benchmark and the equivalence tests use this).
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("SHJB_FORCE_PYTHON", "").strip() not in ("", "0"):
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = _kernels_py


def active_backend() -> str:
    """Name of the kernel implementation in use ("cython" or "numpy")."""
    return kernels.IMPL


def available_backends() -> dict[str, object]:
    """All importable kernel modules, keyed by implementation name."""
    found: dict[str, object] = {_kernels_py.IMPL: _kernels_py}
    try:
        from . import _kernels

        found[_kernels.IMPL] = _kernels
    except ImportError:
        pass
    return found
