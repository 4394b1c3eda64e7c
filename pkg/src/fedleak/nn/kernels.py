"""Backend selection for the convolution-stack kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py`` is used. Setting
``FEDLEAK_PURE_PYTHON=1`` forces the fallback. Both backends return
bit-identical results.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FEDLEAK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
relu_drop_pool_forward = _impl.relu_drop_pool_forward
relu_drop_pool_backward = _impl.relu_drop_pool_backward


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"`` explicitly."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
