"""Backend selection for the box-overlap kernels.

Prefers the compiled Cython extension; falls back to the pure-numpy
implementation when the extension is unavailable or when the
``SLYOLO_PURE_BOXOPS`` environment variable is set to a truthy value.
"""

import os

from . import boxops_py

if os.environ.get("SLYOLO_PURE_BOXOPS", "").lower() in ("1", "true", "yes"):
    _impl = boxops_py
    BACKEND = "python"
else:
    try:
        from . import _boxops as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = boxops_py
        BACKEND = "python"

iou_matrix = _impl.iou_matrix
nms_suppress = _impl.nms_suppress
