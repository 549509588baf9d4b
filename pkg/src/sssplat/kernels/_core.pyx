# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: tiled alpha compositing (forward/backward) and the
analytic ray-traced transmittance used as the visibility-loss target.

Semantics are defined by kernels/_fallback.py; this module must produce the
same numbers (same per-pixel visit order, same expressions). Compositing
tiles are 16x16 and each tile owns a disjoint buffer region.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, erf, exp, floor, sqrt

cnp.import_array()

cdef double RADIUS_SIGMA = 3.5
cdef double G_FLOOR = exp(-0.5 * RADIUS_SIGMA * RADIUS_SIGMA)
cdef double ALPHA_MAX = 0.99
cdef double T_CUTOFF = 1e-4
cdef int TILE = 16
cdef double PI = 3.141592653589793

BACKEND = "compiled"


def composite_forward(cnp.int64_t[::1] order,
                      double[:, ::1] means2d, double[:, ::1] conics,
                      double[::1] opacities, double[::1] depths,
                      double[::1] radii, double[:, ::1] attrs,
                      int width, int height):
    cdef int n_chan = attrs.shape[1]
    chan_np = np.zeros((height, width, n_chan))
    alpha_np = np.zeros((height, width))
    znum_np = np.zeros((height, width))
    count_np = np.zeros((height, width), dtype=np.int32)
    T_np = np.ones((height, width))
    cdef double[:, :, ::1] chan = chan_np
    cdef double[:, ::1] alpha_acc = alpha_np
    cdef double[:, ::1] znum = znum_np
    cdef cnp.int32_t[:, ::1] count = count_np
    cdef double[:, ::1] T = T_np

    cdef double inv_span = 1.0 / (1.0 - G_FLOOR)
    cdef Py_ssize_t n_order = order.shape[0]
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef int tx, ty, tx0, tx1, ty0, ty1
    cdef Py_ssize_t oi, gi
    cdef int x0, x1, y0, y1, px, py, c
    cdef double mx, my, r, A, B, C, o, z
    cdef double dx, dy, sigma, g, t, s, alpha, Tcur, w
    cdef double* crow
    cdef double* arow

    for ty in range(tiles_y):
        ty0 = ty * TILE
        ty1 = min(height - 1, ty0 + TILE - 1)
        for tx in range(tiles_x):
            tx0 = tx * TILE
            tx1 = min(width - 1, tx0 + TILE - 1)
            for oi in range(n_order):
                gi = order[oi]
                mx = means2d[gi, 0]
                my = means2d[gi, 1]
                r = radii[gi]
                x0 = <int>ceil(mx - r)
                x1 = <int>floor(mx + r)
                y0 = <int>ceil(my - r)
                y1 = <int>floor(my + r)
                if x0 < tx0:
                    x0 = tx0
                if x1 > tx1:
                    x1 = tx1
                if y0 < ty0:
                    y0 = ty0
                if y1 > ty1:
                    y1 = ty1
                if x0 > x1 or y0 > y1:
                    continue
                A = conics[gi, 0]
                B = conics[gi, 1]
                C = conics[gi, 2]
                o = opacities[gi]
                z = depths[gi]
                arow = &attrs[gi, 0]
                for py in range(y0, y1 + 1):
                    for px in range(x0, x1 + 1):
                        Tcur = T[py, px]
                        if Tcur < T_CUTOFF:
                            continue
                        dx = px - mx
                        dy = py - my
                        sigma = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
                        g = exp(-sigma)
                        t = (g - G_FLOOR) * inv_span
                        if t <= 0.0:
                            continue
                        if t > 1.0:
                            t = 1.0
                        s = t * t * (3.0 - 2.0 * t)
                        alpha = o * s
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        if alpha <= 0.0:
                            continue
                        w = Tcur * alpha
                        crow = &chan[py, px, 0]
                        for c in range(n_chan):
                            crow[c] += w * arow[c]
                        alpha_acc[py, px] += w
                        znum[py, px] += w * z
                        count[py, px] += 1
                        T[py, px] = Tcur * (1.0 - alpha)
    return chan_np, alpha_np, znum_np, count_np


def composite_backward(cnp.int64_t[::1] order,
                       double[:, ::1] means2d, double[:, ::1] conics,
                       double[::1] opacities, double[::1] depths,
                       double[::1] radii, double[:, ::1] attrs,
                       int width, int height,
                       double[:, :, ::1] chan, double[:, ::1] alpha_acc,
                       double[:, ::1] znum,
                       double[:, :, ::1] d_chan, double[:, ::1] d_alpha,
                       double[:, ::1] d_znum):
    cdef Py_ssize_t n = means2d.shape[0]
    cdef int n_chan = attrs.shape[1]
    d_means2d_np = np.zeros((n, 2))
    d_conics_np = np.zeros((n, 3))
    d_opac_np = np.zeros(n)
    d_depths_np = np.zeros(n)
    d_attrs_np = np.zeros((n, n_chan))
    cdef double[:, ::1] d_means2d = d_means2d_np
    cdef double[:, ::1] d_conics = d_conics_np
    cdef double[::1] d_opac = d_opac_np
    cdef double[::1] d_depths = d_depths_np
    cdef double[:, ::1] d_attrs = d_attrs_np

    S_np = np.asarray(chan).copy()
    SA_np = np.asarray(alpha_acc).copy()
    SZ_np = np.asarray(znum).copy()
    T_np = np.ones((height, width))
    cdef double[:, :, ::1] S = S_np
    cdef double[:, ::1] SA = SA_np
    cdef double[:, ::1] SZ = SZ_np
    cdef double[:, ::1] T = T_np

    cdef double inv_span = 1.0 / (1.0 - G_FLOOR)
    cdef Py_ssize_t n_order = order.shape[0]
    cdef int tiles_x = (width + TILE - 1) // TILE
    cdef int tiles_y = (height + TILE - 1) // TILE
    cdef int tx, ty, tx0, tx1, ty0, ty1
    cdef Py_ssize_t oi, gi
    cdef int x0, x1, y0, y1, px, py, c
    cdef double mx, my, r, A, B, C, o, z
    cdef double dx, dy, sigma, g, t, s, raw, alpha, Tcur, w
    cdef double inv1ma, dalpha, ds, dt, dg, dsigma
    cdef double* srow
    cdef double* arow
    cdef double* garow
    cdef double* dcrow

    for ty in range(tiles_y):
        ty0 = ty * TILE
        ty1 = min(height - 1, ty0 + TILE - 1)
        for tx in range(tiles_x):
            tx0 = tx * TILE
            tx1 = min(width - 1, tx0 + TILE - 1)
            for oi in range(n_order):
                gi = order[oi]
                mx = means2d[gi, 0]
                my = means2d[gi, 1]
                r = radii[gi]
                x0 = <int>ceil(mx - r)
                x1 = <int>floor(mx + r)
                y0 = <int>ceil(my - r)
                y1 = <int>floor(my + r)
                if x0 < tx0:
                    x0 = tx0
                if x1 > tx1:
                    x1 = tx1
                if y0 < ty0:
                    y0 = ty0
                if y1 > ty1:
                    y1 = ty1
                if x0 > x1 or y0 > y1:
                    continue
                A = conics[gi, 0]
                B = conics[gi, 1]
                C = conics[gi, 2]
                o = opacities[gi]
                z = depths[gi]
                arow = &attrs[gi, 0]
                garow = &d_attrs[gi, 0]
                for py in range(y0, y1 + 1):
                    for px in range(x0, x1 + 1):
                        Tcur = T[py, px]
                        if Tcur < T_CUTOFF:
                            continue
                        dx = px - mx
                        dy = py - my
                        sigma = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
                        g = exp(-sigma)
                        t = (g - G_FLOOR) * inv_span
                        if t <= 0.0:
                            continue
                        if t > 1.0:
                            t = 1.0
                        s = t * t * (3.0 - 2.0 * t)
                        raw = o * s
                        alpha = raw
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        if alpha <= 0.0:
                            continue
                        w = Tcur * alpha
                        inv1ma = 1.0 / (1.0 - alpha)
                        dalpha = 0.0
                        srow = &S[py, px, 0]
                        dcrow = &d_chan[py, px, 0]
                        for c in range(n_chan):
                            srow[c] -= w * arow[c]
                            garow[c] += w * dcrow[c]
                            dalpha += dcrow[c] * (Tcur * arow[c] - srow[c] * inv1ma)
                        SA[py, px] -= w
                        SZ[py, px] -= w * z
                        d_depths[gi] += w * d_znum[py, px]
                        dalpha += d_znum[py, px] * (Tcur * z - SZ[py, px] * inv1ma)
                        dalpha += d_alpha[py, px] * (Tcur - SA[py, px] * inv1ma)
                        if raw < ALPHA_MAX:
                            d_opac[gi] += dalpha * s
                            ds = dalpha * o
                            dt = ds * 6.0 * t * (1.0 - t)
                            dg = dt * inv_span
                            dsigma = -g * dg
                            d_conics[gi, 0] += dsigma * 0.5 * dx * dx
                            d_conics[gi, 1] += dsigma * dx * dy
                            d_conics[gi, 2] += dsigma * 0.5 * dy * dy
                            d_means2d[gi, 0] -= dsigma * (A * dx + B * dy)
                            d_means2d[gi, 1] -= dsigma * (B * dx + C * dy)
                        T[py, px] = Tcur * (1.0 - alpha)
    return d_means2d_np, d_conics_np, d_opac_np, d_depths_np, d_attrs_np


def raytrace_taus(double[:, :, ::1] m3inv, double[:, ::1] mu, double[::1] opac,
                  double[:, ::1] points, double[:, ::1] dirs,
                  cnp.int64_t[::1] exclude):
    """Summed analytic optical depth per sample ray.

    m3inv whitens each Gaussian (Sigma = M3 M3^T): along the half-line
    p + t*d the density integrates to o*exp(-s_min)*sqrt(pi/(2A))*erfc(.).
    Contributions with s_min > 36 are dropped (< 2e-16 of the peak).
    """
    cdef Py_ssize_t n = mu.shape[0]
    cdef Py_ssize_t k = points.shape[0]
    taus_np = np.zeros(k)
    cdef double[::1] taus = taus_np
    cdef Py_ssize_t i, gi
    cdef double px, py, pz, dx, dy, dz
    cdef double ux, uy, uz, wx, wy, wz
    cdef double a, b, c0, smin, tstar, acc
    cdef double m00, m01, m02, m10, m11, m12, m20, m21, m22
    cdef double ex, ey, ez

    for i in range(k):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        acc = 0.0
        for gi in range(n):
            if gi == exclude[i]:
                continue
            m00 = m3inv[gi, 0, 0]
            m01 = m3inv[gi, 0, 1]
            m02 = m3inv[gi, 0, 2]
            m10 = m3inv[gi, 1, 0]
            m11 = m3inv[gi, 1, 1]
            m12 = m3inv[gi, 1, 2]
            m20 = m3inv[gi, 2, 0]
            m21 = m3inv[gi, 2, 1]
            m22 = m3inv[gi, 2, 2]
            ex = px - mu[gi, 0]
            ey = py - mu[gi, 1]
            ez = pz - mu[gi, 2]
            ux = m00 * dx + m01 * dy + m02 * dz
            uy = m10 * dx + m11 * dy + m12 * dz
            uz = m20 * dx + m21 * dy + m22 * dz
            wx = m00 * ex + m01 * ey + m02 * ez
            wy = m10 * ex + m11 * ey + m12 * ez
            wz = m20 * ex + m21 * ey + m22 * ez
            a = ux * ux + uy * uy + uz * uz
            if a < 1e-30:
                a = 1e-30
            b = ux * wx + uy * wy + uz * wz
            c0 = wx * wx + wy * wy + wz * wz
            smin = 0.5 * (c0 - b * b / a)
            if smin < 0.0:
                smin = 0.0
            if smin > 36.0:
                continue
            tstar = -b / a
            acc += opac[gi] * exp(-smin) * sqrt(PI / (2.0 * a)) \
                * (1.0 - erf(-tstar * sqrt(a / 2.0)))
        taus[i] = acc
    return taus_np
