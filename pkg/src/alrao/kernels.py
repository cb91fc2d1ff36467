"""Hot-kernel dispatch.

The compiled extension (``alrao._ckernels``) is used when it was built;
otherwise, or when ``ALRAO_PURE_PYTHON=1`` is set, the numpy versions in
``alrao._pykernels`` are used. ``BACKEND`` names the active one.
"""

import os

from . import _pykernels

if os.environ.get("ALRAO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

im2col = _impl.im2col
col2im = _impl.col2im
switch_step = _impl.switch_step
