"""Compiled loops for the planar rotated-lattice fast paths and the
sheared-plate cell visits of the Carleson grids.

Lattice samples are treated as cell centers of a piecewise-constant field, so
linear (1-D) or bilinear (2-D) interpolation of the edge-indexed cumulative
sums is the exact antiderivative of that field.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _bilinear(values, fx, fy):
    nx, ny = values.shape
    if fx < 0.0 or fy < 0.0 or fx > nx - 1 or fy > ny - 1:
        return 0.0
    i = min(int(fx), nx - 2) if nx > 1 else 0
    j = min(int(fy), ny - 2) if ny > 1 else 0
    tx = fx - i
    ty = fy - j
    v00 = values[i, j]
    v10 = values[i + 1, j] if nx > 1 else 0.0
    v01 = values[i, j + 1] if ny > 1 else 0.0
    v11 = values[i + 1, j + 1] if nx > 1 and ny > 1 else 0.0
    return (1 - tx) * ((1 - ty) * v00 + ty * v01) + tx * ((1 - ty) * v10 + ty * v11)


@njit(cache=True, nogil=True)
def sample_rotated(values, x0, y0, h, cx, cy, ux, uy, a0, ha, na, b0, hb, nb):
    """Samples of the bilinear interpolant at ``c + a u + b u_perp`` on a rotated lattice."""
    out = np.zeros((na, nb))
    for i in range(na):
        a = a0 + i * ha
        for j in range(nb):
            b = b0 + j * hb
            x = cx + a * ux - b * uy
            y = cy + a * uy + b * ux
            out[i, j] = _bilinear(values, (x - x0) / h, (y - y0) / h)
    return out


@njit(cache=True, nogil=True)
def _antideriv_1d(cum, col, pos):
    n = cum.shape[0] - 1
    if pos <= 0.0:
        return 0.0
    if pos >= n:
        return cum[n, col]
    k = int(pos)
    t = pos - k
    return cum[k, col] + t * (cum[k + 1, col] - cum[k, col])


@njit(cache=True, nogil=True)
def line_max(samples, ha, scales):
    """Max over scales of centered segment averages along axis 0."""
    na, nb = samples.shape
    cum = np.zeros((na + 1, nb))
    for i in range(na):
        for j in range(nb):
            cum[i + 1, j] = cum[i, j] + samples[i, j] * ha
    out = np.zeros((na, nb))
    for i in range(na):
        for j in range(nb):
            best = 0.0
            for s in scales:
                lo = _antideriv_1d(cum, j, i + 0.5 - s / ha)
                hi = _antideriv_1d(cum, j, i + 0.5 + s / ha)
                v = (hi - lo) / (2.0 * s)
                if v > best:
                    best = v
            out[i, j] = best
    return out


@njit(cache=True, nogil=True)
def _antideriv_2d(cum, pa, pb):
    na = cum.shape[0] - 1
    nb = cum.shape[1] - 1
    pa = min(max(pa, 0.0), float(na))
    pb = min(max(pb, 0.0), float(nb))
    i = min(int(pa), na - 1)
    j = min(int(pb), nb - 1)
    ta = pa - i
    tb = pb - j
    return ((1 - ta) * ((1 - tb) * cum[i, j] + tb * cum[i, j + 1])
            + ta * ((1 - tb) * cum[i + 1, j] + tb * cum[i + 1, j + 1]))


@njit(cache=True, nogil=True)
def rectangle_average(samples, ha, hb, half_a, half_b):
    """Average over ``[a - half_a, a + half_a] x [b - half_b, b + half_b]`` at every lattice node."""
    na, nb = samples.shape
    cum = np.zeros((na + 1, nb + 1))
    for i in range(na):
        row = 0.0
        for j in range(nb):
            row += samples[i, j] * ha * hb
            cum[i + 1, j + 1] = cum[i, j + 1] + row
    out = np.zeros((na, nb))
    da = half_a / ha
    db = half_b / hb
    area = 4.0 * half_a * half_b
    for i in range(na):
        for j in range(nb):
            ca = i + 0.5
            cb = j + 0.5
            v = (_antideriv_2d(cum, ca + da, cb + db) - _antideriv_2d(cum, ca - da, cb + db)
                 - _antideriv_2d(cum, ca + da, cb - db) + _antideriv_2d(cum, ca - da, cb - db))
            out[i, j] = v / area
    return out


@njit(cache=True, nogil=True)
def pull_back_max(out, field, x0, y0, h, cx, cy, ux, uy, a0, ha, b0, hb):
    """``out = max(out, field interpolated at each output node)``, in place."""
    nx, ny = out.shape
    for i in range(nx):
        x = x0 + i * h - cx
        for j in range(ny):
            y = y0 + j * h - cy
            a = x * ux + y * uy
            b = -x * uy + y * ux
            v = _bilinear(field, (a - a0) / ha, (b - b0) / hb)
            if v > out[i, j]:
                out[i, j] = v


@njit(cache=True, nogil=True)
def pull_back_max_masked(field, x0, y0, h, nx, ny, cx, cy, ux, uy, a0, ha, b0, hb, mask):
    """Max of the interpolated field over the output nodes where ``mask`` is set."""
    best = 0.0
    for i in range(nx):
        x = x0 + i * h - cx
        for j in range(ny):
            if not mask[i, j]:
                continue
            y = y0 + j * h - cy
            a = x * ux + y * uy
            b = -x * uy + y * ux
            v = _bilinear(field, (a - a0) / ha, (b - b0) / hb)
            if v > best:
                best = v
    return best


@njit(cache=True, nogil=True)
def _index_bound(a, origin, h):
    # first cell index whose center is >= a
    return int(np.ceil((a - origin) / h - 0.5))


@njit(cache=True, nogil=True)
def plate_cells(mode, field, owner, best, base_shape, x0, hx, z0, hz, c, ell, k0, k1, w, weight):
    """Visit the cells (column, level) whose centers lie in each sheared plate.

    Columns are the flattened base cells; a plate holds the cells whose base
    center is in its half-open cube and whose slice parameter is in [k0, k1).
    mode 0 adds ``weight[p]`` to ``field``; mode 1 records in ``owner`` the
    plate of largest ``weight`` per cell (ties keep the lower index); mode 2
    returns per-plate sums of ``field`` and cell counts.
    """
    P, d = c.shape
    nz = field.shape[1]
    sums = np.zeros(P)
    counts = np.zeros(P, dtype=np.int64)
    lo = np.empty(d, dtype=np.int64)
    size = np.empty(d, dtype=np.int64)
    x = np.empty(d)
    for p in range(P):
        total = 1
        for a in range(d):
            i0 = max(_index_bound(c[p, a] - 0.5 * ell[p], x0[a], hx[a]), 0)
            i1 = min(_index_bound(c[p, a] + 0.5 * ell[p], x0[a], hx[a]), base_shape[a])
            lo[a] = i0
            size[a] = max(i1 - i0, 0)
            total *= size[a]
        for r in range(total):
            rem = r
            col = 0
            stride = 1
            dot = 0.0
            for a in range(d - 1, -1, -1):
                i = lo[a] + rem % size[a]
                rem //= size[a]
                x[a] = x0[a] + (i + 0.5) * hx[a]
                dot += w[p, a] * (x[a] - c[p, a])
                col += i * stride
                stride *= base_shape[a]
            j0 = max(_index_bound(k0[p] - dot, z0, hz), 0)
            j1 = min(_index_bound(k1[p] - dot, z0, hz), nz)
            for j in range(j0, j1):
                if mode == 0:
                    field[col, j] += weight[p]
                elif mode == 1:
                    if weight[p] > best[col, j]:
                        best[col, j] = weight[p]
                        owner[col, j] = p
                else:
                    sums[p] += field[col, j]
                    counts[p] += 1
    return sums, counts

