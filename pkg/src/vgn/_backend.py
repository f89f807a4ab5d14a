"""Kernel backend selection.

The compiled core (``vgn._kernels``) is used when it imports; otherwise the
numpy twins in ``vgn._fallback`` take over. Set ``VGN_BACKEND=python`` to
force the fallback (``VGN_BACKEND=compiled`` makes a missing build an error).
"""
import os

_choice = os.environ.get("VGN_BACKEND", "auto").lower()

if _choice == "python":
    from vgn import _fallback as kernels
    BACKEND = "python"
else:
    try:
        from vgn import _kernels as kernels
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        from vgn import _fallback as kernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]
