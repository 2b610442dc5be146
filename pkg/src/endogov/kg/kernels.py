"""Kernel backend selection.

The compiled extension is used when it was built; set
``ENDOGOV_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _pykernels

try:
    if os.environ.get("ENDOGOV_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend forced by environment")
    from . import _ckernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

row_norms = _impl.row_norms
link_edges = _impl.link_edges
cosine_pairs_above = _impl.cosine_pairs_above
two_hop_relevance = _impl.two_hop_relevance


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True
