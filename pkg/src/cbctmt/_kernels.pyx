# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: Siddon ray traversal, FDK backprojection, direct
3D convolution. Mirrors cbctmt.kernels.reference; all loops are serial so
results are independent of thread count."""

import numpy as np

from libc.math cimport sqrt, cos, sin, floor, fabs, INFINITY


ctypedef fused floating:
    float
    double


cdef double _ALPHA_EPS = 1e-12


cdef inline double _siddon_one(const floating[:, :, ::1] vol,
                               double sx, double sy, double sz,
                               double bx, double by, double bz,
                               double p0x, double p0y, double p0z,
                               double p1x, double p1y, double p1z) noexcept nogil:
    cdef Py_ssize_t nx = vol.shape[2], ny = vol.shape[1], nz = vol.shape[0]
    cdef double dx = p1x - p0x, dy = p1y - p0y, dz = p1z - p0z
    cdef double length = sqrt(dx * dx + dy * dy + dz * dz)
    if length == 0.0:
        return 0.0

    cdef double amin = 0.0, amax = 1.0, a0, a1, tmp
    if dx != 0.0:
        a0 = (bx - p0x) / dx
        a1 = (bx + nx * sx - p0x) / dx
        if a0 > a1:
            tmp = a0; a0 = a1; a1 = tmp
        if a0 > amin: amin = a0
        if a1 < amax: amax = a1
    elif p0x < bx or p0x > bx + nx * sx:
        return 0.0
    if dy != 0.0:
        a0 = (by - p0y) / dy
        a1 = (by + ny * sy - p0y) / dy
        if a0 > a1:
            tmp = a0; a0 = a1; a1 = tmp
        if a0 > amin: amin = a0
        if a1 < amax: amax = a1
    elif p0y < by or p0y > by + ny * sy:
        return 0.0
    if dz != 0.0:
        a0 = (bz - p0z) / dz
        a1 = (bz + nz * sz - p0z) / dz
        if a0 > a1:
            tmp = a0; a0 = a1; a1 = tmp
        if a0 > amin: amin = a0
        if a1 < amax: amax = a1
    elif p0z < bz or p0z > bz + nz * sz:
        return 0.0
    if amin >= amax:
        return 0.0

    # next plane-crossing alpha per axis, strictly beyond amin
    cdef double ax = INFINITY, ay = INFINITY, az = INFINITY
    cdef double dax = 0.0, day = 0.0, daz = 0.0
    cdef double pos
    cdef long first
    if dx != 0.0:
        dax = sx / fabs(dx)
        pos = p0x + amin * dx
        if dx > 0.0:
            first = <long>floor((pos - bx) / sx) + 1
        else:
            first = <long>floor((pos - bx) / sx)  # next plane below, after an exact hit stays
            if (bx + first * sx - p0x) / dx <= amin + _ALPHA_EPS:
                first -= 1
        ax = (bx + first * sx - p0x) / dx
        if ax <= amin + _ALPHA_EPS:
            ax += dax
    if dy != 0.0:
        day = sy / fabs(dy)
        pos = p0y + amin * dy
        if dy > 0.0:
            first = <long>floor((pos - by) / sy) + 1
        else:
            first = <long>floor((pos - by) / sy)
            if (by + first * sy - p0y) / dy <= amin + _ALPHA_EPS:
                first -= 1
        ay = (by + first * sy - p0y) / dy
        if ay <= amin + _ALPHA_EPS:
            ay += day
    if dz != 0.0:
        daz = sz / fabs(dz)
        pos = p0z + amin * dz
        if dz > 0.0:
            first = <long>floor((pos - bz) / sz) + 1
        else:
            first = <long>floor((pos - bz) / sz)
            if (bz + first * sz - p0z) / dz <= amin + _ALPHA_EPS:
                first -= 1
        az = (bz + first * sz - p0z) / dz
        if az <= amin + _ALPHA_EPS:
            az += daz

    cdef double acc = 0.0, acur = amin, anext, mid, seg
    cdef Py_ssize_t ix, iy, iz
    while True:
        anext = amax
        if ax < anext: anext = ax
        if ay < anext: anext = ay
        if az < anext: anext = az
        seg = anext - acur
        if seg > _ALPHA_EPS:
            mid = 0.5 * (acur + anext)
            ix = <Py_ssize_t>floor((p0x + mid * dx - bx) / sx)
            iy = <Py_ssize_t>floor((p0y + mid * dy - by) / sy)
            iz = <Py_ssize_t>floor((p0z + mid * dz - bz) / sz)
            if ix < 0: ix = 0
            elif ix >= nx: ix = nx - 1
            if iy < 0: iy = 0
            elif iy >= ny: iy = ny - 1
            if iz < 0: iz = 0
            elif iz >= nz: iz = nz - 1
            acc += <double>vol[iz, iy, ix] * seg
        if anext >= amax - _ALPHA_EPS:
            break
        acur = anext
        if ax <= anext + _ALPHA_EPS: ax += dax
        if ay <= anext + _ALPHA_EPS: ay += day
        if az <= anext + _ALPHA_EPS: az += daz
    return acc * length


def ray_integrals(const floating[:, :, ::1] vol, spacing, origin,
                  const double[:, ::1] p0, const double[:, ::1] p1):
    cdef double sx = spacing[0], sy = spacing[1], sz = spacing[2]
    cdef double bx = origin[0] - 0.5 * sx
    cdef double by = origin[1] - 0.5 * sy
    cdef double bz = origin[2] - 0.5 * sz
    cdef Py_ssize_t n = p0.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _siddon_one(vol, sx, sy, sz, bx, by, bz,
                                p0[i, 0], p0[i, 1], p0[i, 2],
                                p1[i, 0], p1[i, 1], p1[i, 2])
    return out


def forward_project(const floating[:, :, ::1] vol, spacing, origin,
                    const double[::1] angles, double sad, double sdd,
                    Py_ssize_t rows, Py_ssize_t cols, double pixel_mm):
    cdef double sx = spacing[0], sy = spacing[1], sz = spacing[2]
    cdef double bx = origin[0] - 0.5 * sx
    cdef double by = origin[1] - 0.5 * sy
    cdef double bz = origin[2] - 0.5 * sz
    cdef Py_ssize_t n_proj = angles.shape[0], ia, r, c
    out = np.empty((n_proj, rows, cols), dtype=np.float32)
    cdef float[:, :, ::1] ov = out
    cdef double cb, sb, srcx, srcy, dcx, dcy, eux, euy, u, w, px, py
    with nogil:
        for ia in range(n_proj):
            cb = cos(angles[ia]); sb = sin(angles[ia])
            srcx = sad * cb; srcy = sad * sb
            dcx = (sad - sdd) * cb; dcy = (sad - sdd) * sb
            eux = -sb; euy = cb
            for r in range(rows):
                w = (r - (rows - 1) / 2.0) * pixel_mm
                for c in range(cols):
                    u = (c - (cols - 1) / 2.0) * pixel_mm
                    px = dcx + u * eux
                    py = dcy + u * euy
                    ov[ia, r, c] = <float>_siddon_one(
                        vol, sx, sy, sz, bx, by, bz,
                        srcx, srcy, 0.0, px, py, w)
    return out


def backproject(const double[:, :, ::1] filt, const double[::1] angles,
                double sad, double sdd, double pixel_mm,
                dims, spacing, origin, double dbeta):
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef double sx = spacing[0], sy = spacing[1], sz = spacing[2]
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef Py_ssize_t rows = filt.shape[1], cols = filt.shape[2]
    cdef Py_ssize_t n_proj = angles.shape[0]
    out = np.zeros((nz, ny, nx), dtype=np.float64)
    cdef double[:, :, ::1] acc = out
    cdef double cu = (cols - 1) / 2.0, cw = (rows - 1) / 2.0
    cdef Py_ssize_t ia, ix, iy, iz, r0, c0
    cdef double cb, sb, x, y, z, t, inv_u, cf, rf, fr, fc, v00, v01, v10, v11, val, wgt
    with nogil:
        for ia in range(n_proj):
            cb = cos(angles[ia]); sb = sin(angles[ia])
            for iz in range(nz):
                z = oz + iz * sz
                for iy in range(ny):
                    y = oy + iy * sy
                    for ix in range(nx):
                        x = ox + ix * sx
                        t = -x * sb + y * cb
                        inv_u = 1.0 / (sad - (x * cb + y * sb))
                        cf = t * sdd * inv_u / pixel_mm + cu
                        rf = z * sdd * inv_u / pixel_mm + cw
                        if cf <= -1.0 or cf >= cols or rf <= -1.0 or rf >= rows:
                            continue
                        r0 = <Py_ssize_t>floor(rf)
                        c0 = <Py_ssize_t>floor(cf)
                        fr = rf - r0
                        fc = cf - c0
                        v00 = filt[ia, r0, c0] if (r0 >= 0 and c0 >= 0) else 0.0
                        v01 = filt[ia, r0, c0 + 1] if (r0 >= 0 and c0 + 1 < cols) else 0.0
                        v10 = filt[ia, r0 + 1, c0] if (r0 + 1 < rows and c0 >= 0) else 0.0
                        v11 = filt[ia, r0 + 1, c0 + 1] if (r0 + 1 < rows and c0 + 1 < cols) else 0.0
                        val = (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11)
                        wgt = dbeta * sad * sad * inv_u * inv_u
                        acc[iz, iy, ix] += wgt * val
    return out


def conv3d_forward(const floating[:, :, :, :, ::1] x,
                   const floating[:, :, :, :, ::1] w,
                   const floating[::1] b, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t xd = x.shape[2], yd = x.shape[3], zd = x.shape[4]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oxd = xd + 2 * pad - k + 1
    cdef Py_ssize_t oyd = yd + 2 * pad - k + 1
    cdef Py_ssize_t ozd = zd + 2 * pad - k + 1
    if floating is float:
        out = np.empty((n, co, oxd, oyd, ozd), dtype=np.float32)
    else:
        out = np.empty((n, co, oxd, oyd, ozd), dtype=np.float64)
    cdef floating[:, :, :, :, ::1] ov = out
    cdef Py_ssize_t ni, o, i, ki, kj, kl, ox, oy, oz, xi, yi, zi
    cdef Py_ssize_t ox0, ox1, oy0, oy1, oz0, oz1
    cdef floating wv, bv
    with nogil:
        for ni in range(n):
            for o in range(co):
                bv = b[o]
                for ox in range(oxd):
                    for oy in range(oyd):
                        for oz in range(ozd):
                            ov[ni, o, ox, oy, oz] = bv
                for i in range(ci):
                    for ki in range(k):
                        ox0 = pad - ki if pad - ki > 0 else 0
                        ox1 = xd + pad - ki
                        if ox1 > oxd: ox1 = oxd
                        for kj in range(k):
                            oy0 = pad - kj if pad - kj > 0 else 0
                            oy1 = yd + pad - kj
                            if oy1 > oyd: oy1 = oyd
                            for kl in range(k):
                                oz0 = pad - kl if pad - kl > 0 else 0
                                oz1 = zd + pad - kl
                                if oz1 > ozd: oz1 = ozd
                                wv = w[o, i, ki, kj, kl]
                                for ox in range(ox0, ox1):
                                    xi = ox + ki - pad
                                    for oy in range(oy0, oy1):
                                        yi = oy + kj - pad
                                        for oz in range(oz0, oz1):
                                            ov[ni, o, ox, oy, oz] = ov[ni, o, ox, oy, oz] + wv * x[ni, i, xi, yi, oz + kl - pad]
    return out


def conv3d_grad_input(const floating[:, :, :, :, ::1] gy,
                      const floating[:, :, :, :, ::1] w,
                      Py_ssize_t pad, in_shape):
    cdef Py_ssize_t n = gy.shape[0], co = gy.shape[1]
    cdef Py_ssize_t oxd = gy.shape[2], oyd = gy.shape[3], ozd = gy.shape[4]
    cdef Py_ssize_t ci = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t xd = in_shape[2], yd = in_shape[3], zd = in_shape[4]
    if floating is float:
        out = np.zeros((n, ci, xd, yd, zd), dtype=np.float32)
    else:
        out = np.zeros((n, ci, xd, yd, zd), dtype=np.float64)
    cdef floating[:, :, :, :, ::1] gx = out
    cdef Py_ssize_t ni, o, i, ki, kj, kl, ox, oy, oz
    cdef Py_ssize_t ox0, ox1, oy0, oy1, oz0, oz1
    cdef floating wv
    with nogil:
        for ni in range(n):
            for o in range(co):
                for i in range(ci):
                    for ki in range(k):
                        ox0 = pad - ki if pad - ki > 0 else 0
                        ox1 = xd + pad - ki
                        if ox1 > oxd: ox1 = oxd
                        for kj in range(k):
                            oy0 = pad - kj if pad - kj > 0 else 0
                            oy1 = yd + pad - kj
                            if oy1 > oyd: oy1 = oyd
                            for kl in range(k):
                                oz0 = pad - kl if pad - kl > 0 else 0
                                oz1 = zd + pad - kl
                                if oz1 > ozd: oz1 = ozd
                                wv = w[o, i, ki, kj, kl]
                                for ox in range(ox0, ox1):
                                    for oy in range(oy0, oy1):
                                        for oz in range(oz0, oz1):
                                            gx[ni, i, ox + ki - pad, oy + kj - pad, oz + kl - pad] = gx[ni, i, ox + ki - pad, oy + kj - pad, oz + kl - pad] + wv * gy[ni, o, ox, oy, oz]
    return out


def conv3d_grad_weights(const floating[:, :, :, :, ::1] x,
                        const floating[:, :, :, :, ::1] gy,
                        Py_ssize_t pad, kshape):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t xd = x.shape[2], yd = x.shape[3], zd = x.shape[4]
    cdef Py_ssize_t co = gy.shape[1], k = kshape[2]
    cdef Py_ssize_t oxd = gy.shape[2], oyd = gy.shape[3], ozd = gy.shape[4]
    gw_out = np.zeros((co, ci, k, k, k), dtype=np.float64)
    gb_out = np.zeros(co, dtype=np.float64)
    cdef double[:, :, :, :, ::1] gw = gw_out
    cdef double[::1] gb = gb_out
    cdef Py_ssize_t ni, o, i, ki, kj, kl, ox, oy, oz
    cdef Py_ssize_t ox0, ox1, oy0, oy1, oz0, oz1
    cdef double acc
    with nogil:
        for o in range(co):
            acc = 0.0
            for ni in range(n):
                for ox in range(oxd):
                    for oy in range(oyd):
                        for oz in range(ozd):
                            acc += <double>gy[ni, o, ox, oy, oz]
            gb[o] = acc
        for o in range(co):
            for i in range(ci):
                for ki in range(k):
                    ox0 = pad - ki if pad - ki > 0 else 0
                    ox1 = xd + pad - ki
                    if ox1 > oxd: ox1 = oxd
                    for kj in range(k):
                        oy0 = pad - kj if pad - kj > 0 else 0
                        oy1 = yd + pad - kj
                        if oy1 > oyd: oy1 = oyd
                        for kl in range(k):
                            oz0 = pad - kl if pad - kl > 0 else 0
                            oz1 = zd + pad - kl
                            if oz1 > ozd: oz1 = ozd
                            acc = 0.0
                            for ni in range(n):
                                for ox in range(ox0, ox1):
                                    for oy in range(oy0, oy1):
                                        for oz in range(oz0, oz1):
                                            acc += <double>x[ni, i, ox + ki - pad, oy + kj - pad, oz + kl - pad] * <double>gy[ni, o, ox, oy, oz]
                            gw[o, i, ki, kj, kl] = acc
    if floating is float:
        return gw_out.astype(np.float32), gb_out.astype(np.float32)
    else:
        return gw_out, gb_out
