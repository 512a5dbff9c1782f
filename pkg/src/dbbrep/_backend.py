"""Select the convolution kernel at import time.

The compiled extension is used when it imports cleanly; setting
``DBBREP_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from dbbrep import _fallback

try:
    from dbbrep import _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNELS = {"python": _fallback.conv2d_nchw}
if _ckernels is not None:
    KERNELS["compiled"] = _ckernels.conv2d_nchw

if _ckernels is not None and os.environ.get("DBBREP_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

conv2d_nchw = KERNELS[BACKEND]
