"""Kernel backend selection.

The hot loops (Siddon forward projection, FDK backprojection, direct 3D
convolution) exist twice: a compiled Cython extension (``cbctmt._kernels``)
and a vectorised numpy fallback (:mod:`cbctmt.kernels.reference`). The
compiled backend is picked when importable; ``CBCTMT_KERNELS=python`` or
``compiled`` forces a choice. ``cbctmt bench`` compares the two.
"""

import os

import numpy as np

from cbctmt.kernels import reference as _py

try:
    from cbctmt import _kernels as _compiled
except ImportError:  # pure install, or extension build skipped
    _compiled = None

_FORCED = os.environ.get("CBCTMT_KERNELS", "auto").strip().lower()
if _FORCED not in ("auto", "compiled", "python"):
    raise RuntimeError(f"CBCTMT_KERNELS must be auto|compiled|python, got {_FORCED!r}")
if _FORCED == "compiled" and _compiled is None:
    raise RuntimeError("CBCTMT_KERNELS=compiled but cbctmt._kernels is not built")

_active = _py if (_FORCED == "python" or _compiled is None) else _compiled


def backend_name():
    return "compiled" if _active is _compiled else "python"


def available_backends():
    return ("compiled", "python") if _compiled is not None else ("python",)


def use_backend(name):
    """Switch the active backend ("compiled" or "python"). For tests/benchmarks."""
    global _active
    if name == "python":
        _active = _py
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _active = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


def _c3(v, dtype=np.float64):
    t = tuple(float(x) for x in np.asarray(v, dtype=dtype).ravel())
    if len(t) != 3:
        raise ValueError("expected a length-3 vector")
    return t


def ray_integrals(vol, spacing, origin, p0, p1):
    vol = np.ascontiguousarray(vol)
    p0 = np.ascontiguousarray(np.atleast_2d(p0), dtype=np.float64)
    p1 = np.ascontiguousarray(np.atleast_2d(p1), dtype=np.float64)
    if _active is _py:
        return _py.ray_integrals(vol, spacing, origin, p0, p1)
    return _compiled.ray_integrals(vol, _c3(spacing), _c3(origin), p0, p1)


def forward_project(vol, spacing, origin, angles, sad, sdd, rows, cols, pixel_mm):
    vol = np.ascontiguousarray(vol)
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    if _active is _py:
        return _py.forward_project(vol, spacing, origin, angles, sad, sdd, rows, cols, pixel_mm)
    return _compiled.forward_project(
        vol, _c3(spacing), _c3(origin), angles, float(sad), float(sdd),
        int(rows), int(cols), float(pixel_mm))


def backproject(filt, angles, sad, sdd, pixel_mm, dims, spacing, origin, dbeta):
    filt = np.ascontiguousarray(filt, dtype=np.float64)
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    if _active is _py:
        return _py.backproject(filt, angles, sad, sdd, pixel_mm, dims,
                               _c3(spacing), _c3(origin), dbeta)
    return _compiled.backproject(filt, angles, float(sad), float(sdd), float(pixel_mm),
                                 dims, _c3(spacing), _c3(origin), float(dbeta))


def _check_conv_args(x, w, b):
    if x.dtype != w.dtype or x.dtype != b.dtype:
        raise ValueError(f"conv3d dtype mismatch: {x.dtype}, {w.dtype}, {b.dtype}")
    if w.shape[2] != w.shape[3] or w.shape[2] != w.shape[4]:
        raise ValueError("conv3d kernels must be cubic")


def conv3d_forward(x, w, b, pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    b = np.ascontiguousarray(b)
    _check_conv_args(x, w, b)
    return _active.conv3d_forward(x, w, b, int(pad))


def conv3d_grad_input(gy, w, pad, in_shape):
    gy = np.ascontiguousarray(gy)
    w = np.ascontiguousarray(w)
    return _active.conv3d_grad_input(gy, w, int(pad), tuple(int(s) for s in in_shape))


def conv3d_grad_weights(x, gy, pad, kshape):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    return _active.conv3d_grad_weights(x, gy, int(pad), tuple(int(s) for s in kshape))
