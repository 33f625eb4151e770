"""Kernel backend selection.

Two interchangeable kernel modules exist: ``_ckernels`` (Cython, built at
install time) and ``pykernels`` (numpy). The active one is chosen once at
import. ``METACONTRAST_BACKEND`` forces the choice:

    auto      compiled if importable, else python (default)
    compiled  require the extension, fail loudly if missing
    python    always use the numpy fallback
"""

import os

from . import pykernels

_choice = os.environ.get("METACONTRAST_BACKEND", "auto")

if _choice not in ("auto", "compiled", "python"):
    raise RuntimeError(
        f"METACONTRAST_BACKEND={_choice!r}: expected auto, compiled or python"
    )

kernels = pykernels
if _choice in ("auto", "compiled"):
    try:
        from . import _ckernels  # type: ignore[attr-defined]

        kernels = _ckernels
    except ImportError:
        if _choice == "compiled":
            raise RuntimeError(
                "METACONTRAST_BACKEND=compiled but the _ckernels extension "
                "is not built; reinstall the package or use python backend"
            )


def active_backend() -> str:
    """Name of the kernel backend selected at import ('compiled' or 'python')."""
    return kernels.NAME
