# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled versions of the hot kernels.

The arithmetic here mirrors the NumPy fallback in surgestream.kernels
step for step; the test suite asserts the two backends agree exactly.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef int SAD_BIG = 1 << 28


def block_match(const unsigned char[:, ::1] left,
                const unsigned char[:, ::1] right,
                int window, int d_max, double ratio):
    cdef Py_ssize_t h = left.shape[0]
    cdef Py_ssize_t w = left.shape[1]
    cdef int n_d = d_max + 1
    cdef int half = window // 2
    cdef Py_ssize_t v, u, i, j, d
    cdef Py_ssize_t wd, i0, j0
    cdef long long row_sum
    cdef int sad, best, second, s_dn, s_up, best_d
    cdef double denom, off, dd

    vol_arr = np.full((n_d, h, w), SAD_BIG, dtype=np.int32)
    cdef int[:, :, ::1] vol = vol_arr
    ii_arr = np.zeros((h + 1, w + 1), dtype=np.int64)
    cdef long long[:, ::1] ii = ii_arr

    for d in range(n_d):
        wd = w - d
        if wd < window:
            break
        for i in range(h):
            row_sum = 0
            for j in range(wd):
                row_sum += abs(<int> left[i, j + d] - <int> right[i, j])
                ii[i + 1, j + 1] = ii[i, j + 1] + row_sum
        for v in range(half, h - half):
            i0 = v - half
            for u in range(d + half, w - half):
                j0 = u - d - half
                vol[d, v, u] = <int> (
                    ii[i0 + window, j0 + window]
                    - ii[i0, j0 + window]
                    - ii[i0 + window, j0]
                    + ii[i0, j0]
                )

    disp_arr = np.zeros((h, w), dtype=np.float32)
    valid_arr = np.zeros((h, w), dtype=np.uint8)
    cdef float[:, ::1] disp = disp_arr
    cdef unsigned char[:, ::1] valid = valid_arr

    for v in range(h):
        for u in range(w):
            best = SAD_BIG
            best_d = 0
            for d in range(n_d):
                sad = vol[d, v, u]
                if sad < best:
                    best = sad
                    best_d = <int> d
            if best >= SAD_BIG or best_d <= 0:
                continue
            second = SAD_BIG
            for d in range(n_d):
                if d >= best_d - 1 and d <= best_d + 1:
                    continue
                sad = vol[d, v, u]
                if sad < second:
                    second = sad
            if second >= SAD_BIG:
                continue
            if not (<double> second > ratio * <double> best):
                continue
            dd = 0.0
            if 0 < best_d < n_d - 1:
                s_dn = vol[best_d - 1, v, u]
                s_up = vol[best_d + 1, v, u]
                if s_dn < SAD_BIG and s_up < SAD_BIG:
                    denom = (<double> s_dn) - 2.0 * (<double> best) + (<double> s_up)
                    if denom > 0.0:
                        off = 0.5 * ((<double> s_dn) - (<double> s_up)) / denom
                        if off > 0.5:
                            off = 0.5
                        elif off < -0.5:
                            off = -0.5
                        dd = off
            disp[v, u] = (<float> best_d) + (<float> dd)
            valid[v, u] = 1

    return disp_arr, valid_arr.view(bool)


def build_cloud(const float[:, ::1] values,
                const unsigned char[:, ::1] valid,
                const unsigned char[:, :, ::1] rgb,
                double f, double b, double cx, double cy):
    cdef Py_ssize_t h = values.shape[0]
    cdef Py_ssize_t w = values.shape[1]
    cdef Py_ssize_t v, u, n, k
    cdef double d, z

    n = 0
    for v in range(h):
        for u in range(w):
            if valid[v, u]:
                n += 1

    xyz_arr = np.empty((n, 3), dtype=np.float64)
    col_arr = np.empty((n, 3), dtype=np.uint8)
    cdef double[:, ::1] xyz = xyz_arr
    cdef unsigned char[:, ::1] col = col_arr

    k = 0
    for v in range(h):
        for u in range(w):
            if not valid[v, u]:
                continue
            d = <double> values[v, u]
            z = f * b / d
            xyz[k, 0] = z * (<double> u - cx) / f
            xyz[k, 1] = z * (<double> v - cy) / f
            xyz[k, 2] = z
            col[k, 0] = rgb[v, u, 0]
            col[k, 1] = rgb[v, u, 1]
            col[k, 2] = rgb[v, u, 2]
            k += 1

    return xyz_arr, col_arr
