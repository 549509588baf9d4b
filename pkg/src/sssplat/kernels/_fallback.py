"""Pure-numpy compositing kernels (reference semantics for the compiled core).

Contract shared by both backends and the brute-force reference renderer:

* sigma = 0.5*(A*dx^2 + C*dy^2) + B*dx*dy with conic (A, B, C) = inv(Sigma2d)
  packed as (Q00, Q01, Q11), dx = px - mean_x.
* G = exp(-sigma); t = (G - G_FLOOR) / (1 - G_FLOOR); the footprint weight is
  the C1 taper s(t) = 3t^2 - 2t^3 for t > 0 else 0, so contributions vanish
  exactly (value and slope) at the 3.5-sigma support boundary.
* alpha = min(ALPHA_MAX, opacity * s); the taper keeps alpha = opacity at the
  Gaussian center.
* Gaussians are visited in the caller-supplied order; a pixel stops accepting
  contributions once its transmittance T drops below T_CUTOFF.
* w = T*alpha; channel[c] += w*attr[c]; alpha_acc += w; depth_num += w*z;
  contrib_count += 1 where alpha > 0; then T *= (1 - alpha).
"""

from __future__ import annotations

import numpy as np

RADIUS_SIGMA = 3.5
G_FLOOR = float(np.exp(-0.5 * RADIUS_SIGMA * RADIUS_SIGMA))
ALPHA_MAX = 0.99
T_CUTOFF = 1e-4

BACKEND = "fallback"


def _bbox(mx, my, r, width, height):
    x0 = max(0, int(np.ceil(mx - r)))
    x1 = min(width - 1, int(np.floor(mx + r)))
    y0 = max(0, int(np.ceil(my - r)))
    y1 = min(height - 1, int(np.floor(my + r)))
    return x0, x1, y0, y1


def composite_forward(order, means2d, conics, opacities, depths, radii, attrs,
                      width, height):
    """Front-to-back alpha compositing of projected Gaussians.

    Returns (channels (H,W,C), alpha (H,W), depth_num (H,W), count (H,W)).
    """
    n_chan = attrs.shape[1]
    chan = np.zeros((height, width, n_chan))
    alpha_acc = np.zeros((height, width))
    znum = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int32)
    T = np.ones((height, width))
    inv_span = 1.0 / (1.0 - G_FLOOR)
    for gi in order:
        mx, my = means2d[gi]
        x0, x1, y0, y1 = _bbox(mx, my, radii[gi], width, height)
        if x0 > x1 or y0 > y1:
            continue
        A, B, C = conics[gi]
        xs = np.arange(x0, x1 + 1, dtype=np.float64) - mx
        ys = np.arange(y0, y1 + 1, dtype=np.float64) - my
        dx = xs[None, :]
        dy = ys[:, None]
        sigma = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
        g = np.exp(-sigma)
        t = (g - G_FLOOR) * inv_span
        np.clip(t, 0.0, 1.0, out=t)
        s = t * t * (3.0 - 2.0 * t)
        alpha = np.minimum(ALPHA_MAX, opacities[gi] * s)
        Tsub = T[y0:y1 + 1, x0:x1 + 1]
        live = (Tsub >= T_CUTOFF) & (alpha > 0.0)
        w = np.where(live, Tsub * alpha, 0.0)
        chan[y0:y1 + 1, x0:x1 + 1, :] += w[:, :, None] * attrs[gi][None, None, :]
        alpha_acc[y0:y1 + 1, x0:x1 + 1] += w
        znum[y0:y1 + 1, x0:x1 + 1] += w * depths[gi]
        count[y0:y1 + 1, x0:x1 + 1] += live.astype(np.int32)
        T[y0:y1 + 1, x0:x1 + 1] = np.where(live, Tsub * (1.0 - alpha), Tsub)
    return chan, alpha_acc, znum, count


def raytrace_taus(m3inv, mu, opac, points, dirs, exclude):
    """Summed analytic optical depth per sample ray (numpy version).

    Same contract as the compiled kernel: whitened quadratics, contributions
    with s_min > 36 dropped, half-line erfc factor.
    """
    k = len(points)
    n = len(mu)
    if n == 0:
        return np.zeros(k)
    mt = np.transpose(m3inv, (0, 2, 1))
    U = np.matmul(dirs[None, :, :], mt)                      # (n,k,3)
    W = np.matmul(points[None, :, :], mt) - np.einsum("nij,nj->ni", m3inv, mu)[:, None, :]
    A = np.maximum(np.sum(U * U, axis=2), 1e-30)
    B = np.sum(U * W, axis=2)
    C0 = np.sum(W * W, axis=2)
    t_star = -B / A
    s_min = np.maximum(0.5 * (C0 - B * B / A), 0.0)
    live = s_min <= 36.0
    tau = np.where(live,
                   opac[:, None] * np.exp(np.where(live, -s_min, 0.0))
                   * np.sqrt(np.pi / (2.0 * A))
                   * (1.0 - _erf_approx(-t_star * np.sqrt(A / 2.0))),
                   0.0)
    tau[exclude, np.arange(k)] = 0.0
    return np.sum(tau, axis=0)


def _erf_approx(x):
    # Abramowitz & Stegun 7.1.26, |error| < 1.5e-7
    sign = np.sign(x)
    ax = np.abs(x)
    t = 1.0 / (1.0 + 0.3275911 * ax)
    poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741
                + t * (-1.453152027 + t * 1.061405429))))
    return sign * (1.0 - poly * np.exp(-ax * ax))


def composite_backward(order, means2d, conics, opacities, depths, radii, attrs,
                       width, height, chan, alpha_acc, znum,
                       d_chan, d_alpha, d_znum):
    """Reverse-mode gradients of composite_forward.

    chan/alpha_acc/znum are the forward outputs (suffix initialization).
    Returns (d_means2d, d_conics, d_opac, d_depths, d_attrs).
    """
    n = len(means2d)
    n_chan = attrs.shape[1]
    d_means2d = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_depths = np.zeros(n)
    d_attrs = np.zeros((n, n_chan))
    S = chan.copy()
    SA = alpha_acc.copy()
    SZ = znum.copy()
    T = np.ones((height, width))
    inv_span = 1.0 / (1.0 - G_FLOOR)
    for gi in order:
        mx, my = means2d[gi]
        x0, x1, y0, y1 = _bbox(mx, my, radii[gi], width, height)
        if x0 > x1 or y0 > y1:
            continue
        A, B, C = conics[gi]
        xs = np.arange(x0, x1 + 1, dtype=np.float64) - mx
        ys = np.arange(y0, y1 + 1, dtype=np.float64) - my
        dx = xs[None, :]
        dy = ys[:, None]
        sigma = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
        g = np.exp(-sigma)
        t = (g - G_FLOOR) * inv_span
        np.clip(t, 0.0, 1.0, out=t)
        s = t * t * (3.0 - 2.0 * t)
        raw = opacities[gi] * s
        alpha = np.minimum(ALPHA_MAX, raw)
        Tsub = T[y0:y1 + 1, x0:x1 + 1]
        live = (Tsub >= T_CUTOFF) & (alpha > 0.0)
        w = np.where(live, Tsub * alpha, 0.0)

        Ssub = S[y0:y1 + 1, x0:x1 + 1, :]
        SAsub = SA[y0:y1 + 1, x0:x1 + 1]
        SZsub = SZ[y0:y1 + 1, x0:x1 + 1]
        Ssub -= w[:, :, None] * attrs[gi][None, None, :]
        SAsub -= w
        SZsub -= w * depths[gi]

        dB = d_chan[y0:y1 + 1, x0:x1 + 1, :]
        dAcc = d_alpha[y0:y1 + 1, x0:x1 + 1]
        dZ = d_znum[y0:y1 + 1, x0:x1 + 1]

        d_attrs[gi] += np.einsum("yx,yxc->c", w, dB)
        d_depths[gi] += float(np.sum(w * dZ))

        inv1ma = 1.0 / (1.0 - alpha)
        dalpha = (np.einsum("yxc,yxc->yx", dB,
                            Tsub[:, :, None] * attrs[gi][None, None, :] - Ssub * inv1ma[:, :, None])
                  + dZ * (Tsub * depths[gi] - SZsub * inv1ma)
                  + dAcc * (Tsub - SAsub * inv1ma))
        dalpha = np.where(live, dalpha, 0.0)
        unclamped = raw < ALPHA_MAX
        dalpha_eff = np.where(unclamped, dalpha, 0.0)
        d_opac[gi] += float(np.sum(dalpha_eff * s))
        ds = dalpha_eff * opacities[gi]
        dt = ds * 6.0 * t * (1.0 - t)
        dg = dt * inv_span
        dsigma = -g * dg
        d_conics[gi, 0] += float(np.sum(dsigma * 0.5 * dx * dx))
        d_conics[gi, 1] += float(np.sum(dsigma * dx * dy))
        d_conics[gi, 2] += float(np.sum(dsigma * 0.5 * dy * dy))
        gx = dsigma * (A * dx + B * dy)
        gy = dsigma * (B * dx + C * dy)
        d_means2d[gi, 0] += float(-np.sum(gx))
        d_means2d[gi, 1] += float(-np.sum(gy))

        T[y0:y1 + 1, x0:x1 + 1] = np.where(live, Tsub * (1.0 - alpha), Tsub)
    return d_means2d, d_conics, d_opac, d_depths, d_attrs
