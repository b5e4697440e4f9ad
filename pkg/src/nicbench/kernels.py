"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
run. Both produce bit-identical output. :func:`use_backend` switches at runtime
(the kernel benchmark and the parity tests rely on it).
"""
from nicbench import _pykernels

try:
    from nicbench import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _BACKENDS.get("cython", _pykernels)


def available():
    return sorted(_BACKENDS)


def backend():
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available (have {available()})")
    _active = _BACKENDS[name]


def im2col(x, kh, kw, stride):
    return _active.im2col(x, kh, kw, stride)


def col2im(cols, shape, kh, kw, stride):
    return _active.col2im(cols, shape, kh, kw, stride)


def scatter_add(size, index, values):
    return _active.scatter_add(size, index, values)
