"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or forced via
``CBCTMT_KERNELS=python``). Same contracts as ``cbctmt._kernels``: exact
Siddon traversal, voxel-driven FDK backprojection, direct 3D convolution.
The ray code is vectorised over rays by merging all plane-crossing
parameters per ray, sorting, and gathering voxel values at segment
midpoints, which reproduces the exact per-voxel intersection lengths.
"""

import numpy as np

_RAY_CHUNK = 4096


def _siddon_chunk(vol, spacing, low_edge, p0, p1):
    # vol: (nz, ny, nx); p0/p1: (r, 3) in mm, axis order (x, y, z)
    nz, ny, nx = vol.shape
    dims = np.array([nx, ny, nz])
    d = p1 - p0
    length = np.sqrt((d * d).sum(axis=1))
    r = p0.shape[0]

    amin = np.zeros(r)
    amax = np.ones(r)
    alive = length > 0
    for a in range(3):
        lo = low_edge[a]
        hi = low_edge[a] + dims[a] * spacing[a]
        da = d[:, a]
        zero = da == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            a0 = (lo - p0[:, a]) / da
            a1 = (hi - p0[:, a]) / da
        lo_a = np.where(zero, -np.inf, np.minimum(a0, a1))
        hi_a = np.where(zero, np.inf, np.maximum(a0, a1))
        amin = np.maximum(amin, lo_a)
        amax = np.minimum(amax, hi_a)
        inside = (p0[:, a] >= lo) & (p0[:, a] <= hi)
        alive &= np.where(zero, inside, True)
    amax = np.maximum(amax, amin)

    # all plane-crossing alphas, clipped into [amin, amax] so misses collapse
    cols = int(dims.sum()) + 3 + 2
    alphas = np.empty((r, cols))
    ofs = 0
    for a in range(3):
        planes = low_edge[a] + spacing[a] * np.arange(dims[a] + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            al = (planes[None, :] - p0[:, a : a + 1]) / d[:, a : a + 1]
        al = np.where(np.isfinite(al), al, -np.inf)
        alphas[:, ofs : ofs + dims[a] + 1] = al
        ofs += dims[a] + 1
    alphas[:, -2] = amin
    alphas[:, -1] = amax
    np.clip(alphas, amin[:, None], amax[:, None], out=alphas)
    alphas.sort(axis=1)

    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, :-1] + alphas[:, 1:])
    idx = []
    for a in range(3):
        pts = p0[:, a : a + 1] + mid * d[:, a : a + 1]
        ia = np.floor((pts - low_edge[a]) / spacing[a]).astype(np.int64)
        idx.append(np.clip(ia, 0, dims[a] - 1))
    vals = vol[idx[2], idx[1], idx[0]].astype(np.float64)
    out = (vals * seg).sum(axis=1) * length
    out[~alive] = 0.0
    return out


def ray_integrals(vol, spacing, origin, p0, p1):
    """Exact line integrals through a voxel grid for a batch of segments.

    ``vol`` is (nz, ny, nx); ``spacing``/``origin`` are (x, y, z) in mm with
    ``origin`` the centre of voxel (0, 0, 0); ``p0``/``p1`` are (r, 3) mm
    endpoints. Returns float64 sums of value * intersection-length (mm).
    """
    vol = np.ascontiguousarray(vol)
    spacing = np.asarray(spacing, dtype=np.float64)
    low_edge = np.asarray(origin, dtype=np.float64) - 0.5 * spacing
    p0 = np.atleast_2d(np.asarray(p0, dtype=np.float64))
    p1 = np.atleast_2d(np.asarray(p1, dtype=np.float64))
    out = np.empty(p0.shape[0])
    for s in range(0, p0.shape[0], _RAY_CHUNK):
        e = s + _RAY_CHUNK
        out[s:e] = _siddon_chunk(vol, spacing, low_edge, p0[s:e], p1[s:e])
    return out


def forward_project(vol, spacing, origin, angles, sad, sdd, rows, cols, pixel_mm):
    """Cone-beam projections: one Siddon integral per (angle, pixel)."""
    vol = np.ascontiguousarray(vol)
    n_proj = len(angles)
    out = np.empty((n_proj, rows, cols), dtype=np.float32)
    w = (np.arange(rows) - (rows - 1) / 2.0) * pixel_mm
    u = (np.arange(cols) - (cols - 1) / 2.0) * pixel_mm
    uu, ww = np.meshgrid(u, w)  # (rows, cols)
    for ia, beta in enumerate(angles):
        cb, sb = np.cos(beta), np.sin(beta)
        src = np.array([sad * cb, sad * sb, 0.0])
        det_c = np.array([(sad - sdd) * cb, (sad - sdd) * sb, 0.0])
        e_u = np.array([-sb, cb, 0.0])
        px = det_c[0] + uu * e_u[0]
        py = det_c[1] + uu * e_u[1]
        pz = ww
        p1 = np.stack([px.ravel(), py.ravel(), pz.ravel()], axis=1)
        p0 = np.broadcast_to(src, p1.shape)
        vals = ray_integrals(vol, spacing, origin, p0, p1)
        out[ia] = vals.reshape(rows, cols).astype(np.float32)
    return out


def backproject(filt, angles, sad, sdd, pixel_mm, dims, spacing, origin, dbeta):
    """FDK backprojection accumulator.

    ``filt`` is (n_proj, rows, cols) float64 filtered data; returns a float64
    (nz, ny, nx) volume with per-voxel sums of
    dbeta * sad^2 / U^2 * bilinear(filtered).
    """
    nx, ny, nz = dims
    rows, cols = filt.shape[1], filt.shape[2]
    x = origin[0] + spacing[0] * np.arange(nx)
    y = origin[1] + spacing[1] * np.arange(ny)
    z = origin[2] + spacing[2] * np.arange(nz)
    xg = x[None, None, :]
    yg = y[None, :, None]
    zg = z[:, None, None]
    cu = (cols - 1) / 2.0
    cw = (rows - 1) / 2.0
    acc = np.zeros((nz, ny, nx))
    for ia in range(len(angles)):
        cb, sb = np.cos(angles[ia]), np.sin(angles[ia])
        t = -xg * sb + yg * cb
        inv_u = 1.0 / (sad - (xg * cb + yg * sb))
        cf = t * (sdd * inv_u) / pixel_mm + cu
        rf = zg * (sdd * inv_u) / pixel_mm + cw
        acc += (dbeta * sad * sad) * (inv_u * inv_u) * _bilinear(filt[ia], rf, cf)
    return acc


def _bilinear(img, rf, cf):
    rows, cols = img.shape
    rf, cf = np.broadcast_arrays(rf, cf)
    r0 = np.floor(rf).astype(np.int64)
    c0 = np.floor(cf).astype(np.int64)
    fr = rf - r0
    fc = cf - c0
    out = np.zeros(rf.shape)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
        out[ok] += wgt[ok] * img[rr[ok], cc[ok]]
    return out


def conv3d_forward(x, w, b, pad):
    """Direct 3D cross-correlation, stride 1, symmetric zero padding."""
    k = w.shape[2]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    y = np.tensordot(win, w, axes=[(1, 5, 6, 7), (1, 2, 3, 4)])
    y = np.ascontiguousarray(np.moveaxis(y, -1, 1))
    y += b.reshape(1, -1, 1, 1, 1)
    return y.astype(x.dtype, copy=False)


def conv3d_grad_input(gy, w, pad, in_shape):
    k = w.shape[2]
    fp = k - 1 - pad
    gyp = np.pad(gy, [(0, 0), (0, 0)] + [(fp, fp)] * 3)
    wf = w[:, :, ::-1, ::-1, ::-1]
    win = np.lib.stride_tricks.sliding_window_view(gyp, (k, k, k), axis=(2, 3, 4))
    gx = np.tensordot(win, wf, axes=[(1, 5, 6, 7), (0, 2, 3, 4)])
    gx = np.ascontiguousarray(np.moveaxis(gx, -1, 1))
    assert gx.shape == tuple(in_shape)
    return gx.astype(gy.dtype, copy=False)


def conv3d_grad_weights(x, gy, pad, kshape):
    ox, oy, oz = gy.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    win = np.lib.stride_tricks.sliding_window_view(xp, (ox, oy, oz), axis=(2, 3, 4))
    # win: (n, ci, kx, ky, kz, ox, oy, oz)
    gw = np.tensordot(win, gy, axes=[(0, 5, 6, 7), (0, 2, 3, 4)])
    gw = np.ascontiguousarray(np.moveaxis(gw, -1, 0))
    assert gw.shape == tuple(kshape)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gw.astype(x.dtype, copy=False), gb.astype(x.dtype, copy=False)
