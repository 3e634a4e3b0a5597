"""Backend selection for the hot inner loops.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. Set ``HICYOLO_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HICYOLO_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def available_backends():
    names = {"python": _pykernels}
    try:
        from . import _ckernels

        names["cython"] = _ckernels
    except ImportError:
        pass
    return names


_NAMES = ("im2col", "col2im", "maxpool_forward", "maxpool_backward", "involution_forward", "involution_backward")


def set_backend(name):
    """Rebind the kernel functions to ``name`` ("cython" or "python"); returns the previous name."""
    global BACKEND
    impls = available_backends()
    if name not in impls:
        raise ValueError(f"kernel backend {name!r} is not available (have {sorted(impls)})")
    previous = BACKEND
    for fn in _NAMES:
        globals()[fn] = getattr(impls[name], fn)
    BACKEND = name
    return previous


set_backend(BACKEND)
