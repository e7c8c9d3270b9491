"""Backend selection for the hot loops.

The compiled Cython module is used when it was built; otherwise, or when
``RELIGHTBAKE_PURE_PYTHON=1`` is set before import, the numpy versions run.
"""
from __future__ import annotations

import os

from . import _pykernels

_FORCE_PURE = os.environ.get("RELIGHTBAKE_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PURE:
        raise ImportError("pure python backend forced")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

scene_sdf = _impl.scene_sdf
sphere_trace = _impl.sphere_trace
hash_encode = _impl.hash_encode
hash_scatter = _impl.hash_scatter
atrous_pass = _impl.atrous_pass

try:
    if _FORCE_PURE:
        raise ImportError("pure python backend forced")
    from . import _cfast as _fast

    FAST_BACKEND = "cython"
except ImportError:
    _fast = _pykernels
    FAST_BACKEND = "python"

gelu_cdf = _fast.gelu_cdf
gelu_grad = _fast.gelu_grad
tracer_infer = _fast.tracer_infer
conv3x3_forward = _fast.conv3x3_forward
conv3x3_backward = _fast.conv3x3_backward
instance_norm_forward = _fast.instance_norm_forward
instance_norm_backward = _fast.instance_norm_backward


def backend(name: str, fast: bool = False):
    """Kernel namespace for an explicit backend (``"python"`` or ``"cython"``).

    ``fast=True`` selects the GELU/tracer module instead of the geometry one.
    """
    if name == "python":
        return _pykernels
    if name == "cython":
        if fast:
            from . import _cfast

            return _cfast
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
