# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled inner loops: lattice-translation neighbor enumeration and structure-factor sums."""

import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor, sqrt, cos, sin, exp, M_PI

cnp.import_array()


def lattice_neighbors(double[:, ::1] centers, double[:, ::1] copies, double[:, ::1] cell,
                      double[::1] heights, double cutoff, double min_dist=1e-8):
    """Every (center, copy, lattice shift) with 0 < |r| <= cutoff.

    ``centers``/``copies`` are fractional, ``cell`` has lattice vectors as rows.
    Returns ``(ci, mi, shifts, disp, dist)``.
    """
    cdef Py_ssize_t n = centers.shape[0], m = copies.shape[0]
    cdef Py_ssize_t i, j, k, cap = 64, cnt = 0
    cdef int n0, n1, n2, lo0, lo1, lo2, hi0, hi1, hi2
    cdef double d0, d1, d2, f0, f1, f2, x, y, z, r2
    cdef double c2 = cutoff * cutoff, m2 = min_dist * min_dist
    cdef double e0 = cutoff / heights[0], e1 = cutoff / heights[1], e2 = cutoff / heights[2]

    ci_arr = np.empty(cap, dtype=np.int64)
    mi_arr = np.empty(cap, dtype=np.int64)
    sh_arr = np.empty((cap, 3), dtype=np.int64)
    dv_arr = np.empty((cap, 3), dtype=np.float64)
    cdef cnp.int64_t[::1] ci = ci_arr
    cdef cnp.int64_t[::1] mi = mi_arr
    cdef cnp.int64_t[:, ::1] sh = sh_arr
    cdef double[:, ::1] dv = dv_arr

    for i in range(n):
        for j in range(m):
            d0 = copies[j, 0] - centers[i, 0]
            d1 = copies[j, 1] - centers[i, 1]
            d2 = copies[j, 2] - centers[i, 2]
            lo0 = <int>ceil(-e0 - d0); hi0 = <int>floor(e0 - d0)
            lo1 = <int>ceil(-e1 - d1); hi1 = <int>floor(e1 - d1)
            lo2 = <int>ceil(-e2 - d2); hi2 = <int>floor(e2 - d2)
            for n0 in range(lo0, hi0 + 1):
                f0 = d0 + n0
                for n1 in range(lo1, hi1 + 1):
                    f1 = d1 + n1
                    for n2 in range(lo2, hi2 + 1):
                        f2 = d2 + n2
                        x = f0 * cell[0, 0] + f1 * cell[1, 0] + f2 * cell[2, 0]
                        y = f0 * cell[0, 1] + f1 * cell[1, 1] + f2 * cell[2, 1]
                        z = f0 * cell[0, 2] + f1 * cell[1, 2] + f2 * cell[2, 2]
                        r2 = x * x + y * y + z * z
                        if r2 > c2 or r2 < m2:
                            continue
                        if cnt == cap:
                            cap *= 2
                            ci_arr = np.resize(ci_arr, cap); ci = ci_arr
                            mi_arr = np.resize(mi_arr, cap); mi = mi_arr
                            sh_arr = np.resize(sh_arr, (cap, 3)); sh = sh_arr
                            dv_arr = np.resize(dv_arr, (cap, 3)); dv = dv_arr
                        ci[cnt] = i
                        mi[cnt] = j
                        sh[cnt, 0] = n0; sh[cnt, 1] = n1; sh[cnt, 2] = n2
                        dv[cnt, 0] = x; dv[cnt, 1] = y; dv[cnt, 2] = z
                        cnt += 1
    disp = dv_arr[:cnt].copy()
    return (ci_arr[:cnt].copy(), mi_arr[:cnt].copy(), sh_arr[:cnt].copy(), disp,
            np.sqrt((disp * disp).sum(axis=1)))


def structure_factor_sum(double[:, ::1] hkl, double[::1] stol2, double[:, ::1] xyz,
                         cnp.int64_t[::1] types, double[::1] occ, double[::1] u_iso,
                         double[:, ::1] ftab):
    """Fc(h) = sum_a occ_a f_type(a)(h) exp(-8 pi^2 U_a s^2) exp(2 pi i h.x_a)."""
    cdef Py_ssize_t nr = hkl.shape[0], na = xyz.shape[0], r, a
    cdef double re, im, ph, w, b
    cdef double twopi = 2.0 * M_PI, dw = 8.0 * M_PI * M_PI
    out_re = np.zeros(nr)
    out_im = np.zeros(nr)
    cdef double[::1] ore = out_re
    cdef double[::1] oim = out_im
    for r in range(nr):
        re = 0.0
        im = 0.0
        for a in range(na):
            ph = twopi * (hkl[r, 0] * xyz[a, 0] + hkl[r, 1] * xyz[a, 1] + hkl[r, 2] * xyz[a, 2])
            w = occ[a] * ftab[types[a], r] * exp(-dw * u_iso[a] * stol2[r])
            re += w * cos(ph)
            im += w * sin(ph)
        ore[r] = re
        oim[r] = im
    return out_re + 1j * out_im
