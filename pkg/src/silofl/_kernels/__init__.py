"""Hot-kernel backend selection.

The compiled extension (`silofl._kernels._core`, Cython) is preferred; the
pure-numpy module is the fallback and is always available. Set
SILOFL_FORCE_NUMPY=1 to force the fallback. `BACKEND` names the active one.
"""

import os

from . import numpy_backend

if os.environ.get("SILOFL_FORCE_NUMPY") == "1":
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
relu_forward = _impl.relu_forward
relu_backward = _impl.relu_backward
softmax_xent = _impl.softmax_xent
