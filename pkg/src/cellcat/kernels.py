"""Kernel backend selection.

The compiled Cython backend is used when importable; otherwise the
NumPy/SciPy fallback takes over. Both return bit-identical results.
Set CAT_KERNELS=cython|python to force a backend (cython raises if the
extension is missing).
"""

import os

_choice = os.environ.get("CAT_KERNELS", "auto").strip().lower() or "auto"

if _choice in ("auto", "cython"):
    try:
        from . import _kernels_cy as _impl

        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "CAT_KERNELS=cython but the compiled extension is not available; "
                "reinstall with `pip install -e . --no-build-isolation`"
            ) from None
        from . import _kernels_np as _impl

        BACKEND = "numpy"
elif _choice in ("python", "numpy"):
    from . import _kernels_np as _impl

    BACKEND = "numpy"
else:
    raise ValueError(f"unrecognized CAT_KERNELS value: {_choice!r}")

b3_smooth = _impl.b3_smooth
label_components = _impl.label_components
region_counts = _impl.region_counts
region_sums = _impl.region_sums
region_bboxes = _impl.region_bboxes
