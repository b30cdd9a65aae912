"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``TALKMOTION_BACKEND=python`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TALKMOTION_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def use_backend(name):
    """Switch kernels at runtime (``"cython"`` or ``"python"``). Returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return prev


def cython_available():
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def layer_norm_forward(x, gain, bias, eps):
    return _impl.layer_norm_forward(x, gain, bias, eps)


def layer_norm_backward(dy, xhat, rstd, gain):
    return _impl.layer_norm_backward(dy, xhat, rstd, gain)


def softmax_rows(x):
    return _impl.softmax_rows(x)


def softmax_rows_backward(y, dy):
    return _impl.softmax_rows_backward(y, dy)


def gelu_forward(x):
    return _impl.gelu_forward(x)


def gelu_backward(x, dy):
    return _impl.gelu_backward(x, dy)


def umeyama2d_batch(src, dst):
    return _impl.umeyama2d_batch(src, dst)
