"""Training objective terms: photometric (L1 + SSIM), mask BCE, bilateral
smoothness, base-color enhancement, normal consistency, SH-visibility
regularizers, and the two multi-view geometric consistency losses.

Every term has a value function matching its spec contract plus a *_grad
variant returning the gradients the training step needs. Multi-view terms
filter correspondences (frame bounds, target silhouette, depth validity) and
normalize by the valid count; validity acts as a stop-gradient gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import render
from .camera import bilinear_weights
from .errors import ShapeMismatch
from .shading import sh_basis

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11
BCE_CLIP = 1e-6

MASK_DILATE = 8
MAX_CORRESPONDENCES = 4096
MV_NEIGHBORS = 2


@dataclass
class LossWeights:
    """All lambda coefficients of the total objective.

    lambda_smooth mirrors the per-attribute smooth weights in
    (metalness, roughness, subsurfaceness, base_color) order;
    lambda_visibility is the paper-table alias of lambda_ray.
    """

    lambda_dssim: float = 0.492
    lambda_mask: float = 0.1
    lambda_smooth: tuple = (0.007, 0.003, 0.002, 0.005)
    lambda_enh: float = 0.005
    lambda_ray: float = 0.01
    lambda_sil: float = 0.5
    lambda_depth: float = 0.3
    lambda_normal: float = 0.037
    lambda_visibility: float = 0.01
    lambda_incident_light: float = 0.015
    lambda_base_color: float = 0.002
    lambda_base_color_smooth: float = 0.005
    lambda_metallic_smooth: float = 0.007
    lambda_roughness_smooth: float = 0.003
    lambda_subsurfaceness_smooth: float = 0.002
    synthetic_alpha: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if not (0.0 <= self.synthetic_alpha <= 1.0):
            raise ValueError("synthetic_alpha must lie in [0,1]")

    @classmethod
    def tuned(cls):
        return cls()

    @classmethod
    def original(cls):
        return cls(lambda_dssim=0.2, lambda_normal=0.02, lambda_incident_light=0.02,
                   lambda_base_color=0.005, lambda_base_color_smooth=0.006,
                   lambda_metallic_smooth=0.002, lambda_roughness_smooth=0.002,
                   lambda_subsurfaceness_smooth=0.002,
                   lambda_smooth=(0.002, 0.002, 0.002, 0.006))

    def smooth_weights(self):
        return {"metalness": self.lambda_metallic_smooth,
                "roughness": self.lambda_roughness_smooth,
                "subsurfaceness": self.lambda_subsurfaceness_smooth,
                "base_color": self.lambda_base_color_smooth}


@dataclass
class LossReport:
    """Per-term values, their weighted contributions, and the total."""

    terms: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    total: float = 0.0
    valid_counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    is_synthetic: bool = False

    def line(self, iteration: int) -> str:
        parts = [f"iter={iteration}"]
        for k in sorted(self.terms):
            parts.append(f"{k}={self.terms[k]:.9e}")
        parts.append(f"total={self.total:.9e}")
        return " ".join(parts)


# ---------------------------------------------------------------------------
# photometric: masked L1 + SSIM
# ---------------------------------------------------------------------------

def _ssim_kernel():
    x = np.arange(SSIM_WIN, dtype=np.float64) - (SSIM_WIN - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return g / g.sum()

_G1D = _ssim_kernel()


def _sepconv(img: np.ndarray, g=_G1D) -> np.ndarray:
    """Zero-padded 'same' convolution with the separable window."""
    half = len(g) // 2
    h, w = img.shape
    tmp = np.zeros_like(img)
    for k in range(len(g)):
        off = k - half
        lo, hi = max(0, -off), min(w, w - off)
        tmp[:, lo:hi] += g[k] * img[:, lo + off:hi + off]
    out = np.zeros_like(img)
    for k in range(len(g)):
        off = k - half
        lo, hi = max(0, -off), min(h, h - off)
        out[lo:hi, :] += g[k] * tmp[lo + off:hi + off, :]
    return out


def ssim_grad(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Masked SSIM (11x11 Gaussian window, sigma 1.5, K1/K2 defaults,
    dynamic range 1) and its gradient w.r.t. pred."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    msum = mask.sum()
    if msum <= 0:
        return 1.0, np.zeros_like(pred)
    nch = pred.shape[2]
    val = 0.0
    dpred = np.zeros_like(pred)
    for c in range(nch):
        x = pred[:, :, c]
        y = gt[:, :, c]
        mx = _sepconv(x)
        my = _sepconv(y)
        ex2 = _sepconv(x * x)
        exy = _sepconv(x * y)
        ey2 = _sepconv(y * y)
        sx = ex2 - mx * mx
        sy = ey2 - my * my
        sxy = exy - mx * my
        a1 = 2 * mx * my + c1
        a2 = 2 * sxy + c2
        b1 = mx * mx + my * my + c1
        b2 = sx + sy + c2
        S = (a1 * a2) / (b1 * b2)
        val += float(np.sum(mask * S) / msum)
        u = mask / (msum * nch)
        da1 = u * a2 / (b1 * b2)
        da2 = u * a1 / (b1 * b2)
        db1 = -u * S / b1
        db2 = -u * S / b2
        dmx = da1 * 2 * my + db1 * 2 * mx + da2 * (-2 * my) + db2 * (-2 * mx)
        dex2 = db2
        dexy = 2 * da2
        dpred[:, :, c] = _sepconv(dmx) + 2 * x * _sepconv(dex2) + y * _sepconv(dexy)
    return val / nch, dpred


def photometric(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray):
    """Masked mean absolute error and SSIM value."""
    (l1, ssim_val), _ = photometric_grad(pred, gt, mask)
    return l1, ssim_val


def photometric_grad(pred, gt, mask):
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    msum = mask.sum()
    diff = pred - gt
    if msum <= 0:
        return (0.0, 1.0), (np.zeros_like(pred), np.zeros_like(pred))
    l1 = float(np.sum(mask[:, :, None] * np.abs(diff)) / (3.0 * msum))
    dl1 = mask[:, :, None] * np.sign(diff) / (3.0 * msum)
    sval, dssim = ssim_grad(pred, gt, mask)
    return (l1, sval), (dl1, dssim)


# ---------------------------------------------------------------------------
# mask BCE
# ---------------------------------------------------------------------------

def mask_loss(silhouette, gt_mask):
    val, _ = mask_loss_grad(silhouette, gt_mask)
    return val


def mask_loss_grad(silhouette, gt_mask):
    if silhouette.shape != gt_mask.shape:
        raise ShapeMismatch(f"{silhouette.shape} vs {gt_mask.shape}")
    p = np.clip(silhouette, BCE_CLIP, 1.0 - BCE_CLIP)
    val = float(np.mean(-(gt_mask * np.log(p) + (1.0 - gt_mask) * np.log(1.0 - p))))
    inside = (silhouette > BCE_CLIP) & (silhouette < 1.0 - BCE_CLIP)
    dsil = np.where(inside, (-gt_mask / p + (1.0 - gt_mask) / (1.0 - p)) / silhouette.size, 0.0)
    return val, dsil


# ---------------------------------------------------------------------------
# bilateral smoothness
# ---------------------------------------------------------------------------

def _grad_mag(img):
    """Forward-difference gradient magnitude on the (H-1, W-1) crop."""
    a = img if img.ndim == 3 else img[:, :, None]
    gx = a[:-1, 1:, :] - a[:-1, :-1, :]
    gy = a[1:, :-1, :] - a[:-1, :-1, :]
    mag = np.sqrt(np.sum(gx * gx, axis=2) + np.sum(gy * gy, axis=2))
    return gx, gy, mag


def bilateral_smooth(attr_map, rgb_image, mask):
    val, _ = bilateral_smooth_grad(attr_map, rgb_image, mask)
    return val


def bilateral_smooth_grad(attr_map, rgb_image, mask):
    """Edge-aware smoothness: |grad attr| * exp(-|grad I|), masked mean."""
    if attr_map.shape[:2] != rgb_image.shape[:2] or attr_map.shape[:2] != mask.shape[:2]:
        raise ShapeMismatch("attribute/image/mask shapes disagree")
    gx, gy, mag = _grad_mag(attr_map)
    _, _, img_mag = _grad_mag(rgb_image)
    w_img = np.exp(-img_mag)
    m = mask[:-1, :-1] * mask[:-1, 1:] * mask[1:, :-1]
    denom = max(m.sum(), 1.0)
    val = float(np.sum(m * mag * w_img) / denom)
    dmag = m * w_img / denom
    safe = np.where(mag > 0, mag, 1.0)
    scale = np.where(mag > 0, dmag / safe, 0.0)
    dgx = scale[:, :, None] * gx
    dgy = scale[:, :, None] * gy
    dattr = np.zeros(attr_map.shape[:2] + (gx.shape[2],))
    dattr[:-1, 1:, :] += dgx
    dattr[:-1, :-1, :] -= dgx
    dattr[1:, :-1, :] += dgy
    dattr[:-1, :-1, :] -= dgy
    if attr_map.ndim == 2:
        dattr = dattr[:, :, 0]
    return val, dattr


# ---------------------------------------------------------------------------
# enhancement (base color pseudo-target)
# ---------------------------------------------------------------------------

def enhance_target(rgb_image, k_sigmoid: float = 10.0):
    """T = sw*I^2 + (1-sw)*(1-(1-I)^2) with sw = sigmoid(k*(luma-0.5))."""
    from .imgio import luma

    sw = 1.0 / (1.0 + np.exp(-k_sigmoid * (luma(rgb_image) - 0.5)))
    return sw[:, :, None] * rgb_image ** 2 + (1.0 - sw[:, :, None]) * (1.0 - (1.0 - rgb_image) ** 2)


def enhance_loss(base_color_map, rgb_image, mask, k_sigmoid: float = 10.0):
    val, _ = enhance_loss_grad(base_color_map, rgb_image, mask, k_sigmoid)
    return val


def enhance_loss_grad(base_color_map, rgb_image, mask, k_sigmoid: float = 10.0):
    T = enhance_target(rgb_image, k_sigmoid)
    msum = max(mask.sum(), 1.0)
    diff = T - base_color_map
    val = float(np.sum(mask[:, :, None] * np.abs(diff)) / (3.0 * msum))
    dbase = -mask[:, :, None] * np.sign(diff) / (3.0 * msum)
    return val, dbase


# ---------------------------------------------------------------------------
# normal consistency against depth-derived pseudo-normals
# ---------------------------------------------------------------------------

def _pixel_rays(cam):
    xs = np.arange(cam.width, dtype=np.float64)
    ys = np.arange(cam.height, dtype=np.float64)
    u, v = np.meshgrid(xs, ys)
    d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d = d @ cam.rotation  # R^T applied to rows
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def normal_consistency(normal_buf, depth_buf, cam, mask):
    val, _, _ = normal_consistency_grad(normal_buf, depth_buf, cam, mask)
    return val


def normal_consistency_grad(normal_buf, depth_buf, cam, mask):
    """Mean L2 distance between rendered normals and pseudo-normals from the
    depth buffer (cross product of forward-difference back-projections).

    Returns (value, d_normal_buf, d_depth_buf)."""
    H, W = depth_buf.shape
    rays = _pixel_rays(cam)
    finite = np.isfinite(depth_buf)
    D = np.where(finite, depth_buf, 0.0)
    P = cam.camera_center[None, None, :] + D[:, :, None] * rays

    valid = (finite[:-1, :-1] & finite[:-1, 1:] & finite[1:, :-1]
             & (mask[:-1, :-1] > 0.5))
    nrm = normal_buf[:-1, :-1, :]
    nn = np.linalg.norm(nrm, axis=2)
    valid &= nn > 1e-9

    hvec = P[:-1, 1:, :] - P[:-1, :-1, :]
    vvec = P[1:, :-1, :] - P[:-1, :-1, :]
    cr = np.cross(hvec, vvec)
    cn = np.linalg.norm(cr, axis=2)
    valid &= cn > 1e-12
    to_cam = cam.camera_center[None, None, :] - P[:-1, :-1, :]
    flip = np.where(np.sum(cr * to_cam, axis=2) >= 0.0, 1.0, -1.0)
    safe_cn = np.where(valid, cn, 1.0)
    n_tilde = flip[:, :, None] * cr / safe_cn[:, :, None]

    safe_nn = np.where(valid, nn, 1.0)
    n_hat = nrm / safe_nn[:, :, None]

    diff = n_hat - n_tilde
    dist = np.linalg.norm(diff, axis=2)
    count = max(int(valid.sum()), 1)
    val = float(np.sum(np.where(valid, dist, 0.0)) / count)

    safe_dist = np.where(dist > 1e-12, dist, 1.0)
    u = np.where(valid & (dist > 1e-12), 1.0 / (count * safe_dist), 0.0)
    ddiff = u[:, :, None] * diff

    # normal branch (through normalization)
    dn_hat = ddiff
    d_nrm = (dn_hat - n_hat * np.sum(n_hat * dn_hat, axis=2, keepdims=True)) / safe_nn[:, :, None]
    d_normal_buf = np.zeros_like(normal_buf)
    d_normal_buf[:-1, :-1, :] = np.where(valid[:, :, None], d_nrm, 0.0)

    # pseudo-normal branch (through normalize, flip, cross, back-projection)
    dn_tilde = -ddiff
    dcr_unit = flip[:, :, None] * dn_tilde
    dcr = (dcr_unit - (cr / safe_cn[:, :, None]) *
           np.sum(cr * dcr_unit, axis=2, keepdims=True) / safe_cn[:, :, None]) / safe_cn[:, :, None]
    dcr = np.where(valid[:, :, None], dcr, 0.0)
    dh = np.cross(vvec, dcr)
    dv = np.cross(dcr, hvec)
    dP = np.zeros_like(P)
    dP[:-1, 1:, :] += dh
    dP[:-1, :-1, :] -= dh + dv
    dP[1:, :-1, :] += dv
    d_depth = np.sum(dP * rays, axis=2)
    d_depth_buf = np.where(finite, d_depth, 0.0)
    return val, d_normal_buf, d_depth_buf


# ---------------------------------------------------------------------------
# multi-view silhouette / depth consistency
# ---------------------------------------------------------------------------

def dilate_mask(mask: np.ndarray, radius: int = MASK_DILATE) -> np.ndarray:
    out = mask > 0.5
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def sample_domain(mask: np.ndarray, rng: np.random.Generator,
                  max_count: int = MAX_CORRESPONDENCES, dilate: int = MASK_DILATE):
    """Pixel (x, y) samples of the dilated-mask domain Omega, subsampled."""
    dil = dilate_mask(mask, dilate)
    ys, xs = np.nonzero(dil)
    if len(xs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if len(xs) > max_count:
        sel = rng.choice(len(xs), size=max_count, replace=False)
        sel.sort()
        xs, ys = xs[sel], ys[sel]
    return np.stack([xs, ys], axis=1).astype(np.int64)


@dataclass
class MvCorrespondences:
    """Valid correspondences of one (source, target) view pair."""

    pixels: np.ndarray        # (k,2) int source pixels
    target_uv: np.ndarray     # (k,2) continuous target pixels
    zhat: np.ndarray          # (k,) reprojected Euclidean depth
    src_depth: np.ndarray     # (k,) source depth used
    X: np.ndarray             # (k,3) back-projected world points
    rays: np.ndarray          # (k,3) source pixel rays
    rendered_source: bool
    n_requested: int


def build_correspondences(src_cam, dst_cam, pixels, src_depth_map, dst_silhouette,
                          dst_depth, silhouette_tolerance: float = 0.05,
                          rendered_source: bool = False,
                          occlusion_margin: float = None) -> MvCorrespondences:
    """Filter the sampled source pixels down to geometrically valid ones.

    Discards: invalid source depth, reprojections behind the target camera
    or outside the frame, target silhouette below tolerance, non-finite
    target depth at any bilinear neighbor, and points occluded in the target
    view (reprojected depth beyond the rendered target depth by more than
    occlusion_margin; without this check the far side of a convex object
    masquerades as a valid correspondence).
    """
    n_req = len(pixels)
    if n_req == 0:
        return MvCorrespondences(pixels, np.zeros((0, 2)), np.zeros(0), np.zeros(0),
                                 np.zeros((0, 3)), np.zeros((0, 3)), rendered_source, 0)
    px = pixels[:, 0]
    py = pixels[:, 1]
    D = src_depth_map[py, px]
    ok = np.isfinite(D) & (D > 0)

    u0 = (px - src_cam.cx) / src_cam.fx
    v0 = (py - src_cam.cy) / src_cam.fy
    rays = np.stack([u0, v0, np.ones_like(u0)], axis=1) @ src_cam.rotation
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    X = src_cam.camera_center[None, :] + np.where(ok, D, 1.0)[:, None] * rays

    pc = X @ dst_cam.rotation.T + dst_cam.translation
    ok &= pc[:, 2] > 1e-9
    z = np.where(pc[:, 2] > 1e-9, pc[:, 2], 1.0)
    u = dst_cam.fx * pc[:, 0] / z + dst_cam.cx
    v = dst_cam.fy * pc[:, 1] / z + dst_cam.cy
    ok &= (u >= 0) & (u <= dst_cam.width - 1) & (v >= 0) & (v <= dst_cam.height - 1)

    uv = np.stack([np.where(ok, u, 0.0), np.where(ok, v, 0.0)], axis=1)
    if dst_silhouette is not None:
        ys4, xs4, ws4 = bilinear_weights(dst_silhouette.shape, uv)
        s = np.sum(dst_silhouette[ys4, xs4] * ws4, axis=1)
        ok &= s >= silhouette_tolerance
    zhat = np.linalg.norm(X - dst_cam.camera_center[None, :], axis=1)
    if dst_depth is not None:
        ys4, xs4, ws4 = bilinear_weights(dst_depth.shape, uv)
        neigh = dst_depth[ys4, xs4]
        finite = np.all(np.isfinite(neigh), axis=1)
        ok &= finite
        if occlusion_margin is not None:
            dj = np.sum(np.where(np.isfinite(neigh), neigh, 0.0) * ws4, axis=1)
            ok &= zhat <= dj + occlusion_margin

    k = np.where(ok)[0]
    return MvCorrespondences(pixels[k], uv[k], zhat[k], D[k], X[k], rays[k],
                             rendered_source, n_req)


def bilinear_spatial(img, uv):
    """Value and (d/du, d/dv) of the bilinear sample at continuous uv."""
    h, w = img.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fu = u - x0
    fv = v - y0
    s00, s01 = img[y0, x0], img[y0, x1]
    s10, s11 = img[y1, x0], img[y1, x1]
    val = (1 - fv) * ((1 - fu) * s00 + fu * s01) + fv * ((1 - fu) * s10 + fu * s11)
    du = (1 - fv) * (s01 - s00) + fv * (s11 - s10)
    dv = (1 - fu) * (s10 - s00) + fu * (s11 - s01)
    return val, du, dv


def mv_source_depth_grad(corr: MvCorrespondences, src_cam, dst_cam,
                         d_uv: np.ndarray, d_zhat: np.ndarray, shape):
    """Chain target-pixel and reprojected-depth gradients back to the source
    depth map (rendered-source mode). Returns d_src_depth (H,W)."""
    out = np.zeros(shape)
    if len(corr.pixels) == 0:
        return out
    X = corr.X
    pc = X @ dst_cam.rotation.T + dst_cam.translation
    z = pc[:, 2]
    R = dst_cam.rotation
    du_dX = dst_cam.fx * (R[0][None, :] * z[:, None] - pc[:, 0][:, None] * R[2][None, :]) / (z * z)[:, None]
    dv_dX = dst_cam.fy * (R[1][None, :] * z[:, None] - pc[:, 1][:, None] * R[2][None, :]) / (z * z)[:, None]
    dz_dX = (X - dst_cam.camera_center[None, :]) / np.maximum(corr.zhat, 1e-12)[:, None]
    dX = (d_uv[:, 0][:, None] * du_dX + d_uv[:, 1][:, None] * dv_dX
          + d_zhat[:, None] * dz_dX)
    dD = np.sum(corr.rays * dX, axis=1)
    np.add.at(out, (corr.pixels[:, 1], corr.pixels[:, 0]), dD)
    return out


def _kl_pair(t, p):
    tc = np.clip(t, BCE_CLIP, 1 - BCE_CLIP)
    pc = np.clip(p, BCE_CLIP, 1 - BCE_CLIP)
    val = tc * (np.log(tc) - np.log(pc)) + (1 - tc) * (np.log(1 - tc) - np.log(1 - pc))
    d_t = np.log(tc) - np.log(pc) - np.log(1 - tc) + np.log(1 - pc)
    d_p = -tc / pc + (1 - tc) / (1 - pc)
    in_t = (t > BCE_CLIP) & (t < 1 - BCE_CLIP)
    in_p = (p > BCE_CLIP) & (p < 1 - BCE_CLIP)
    return val, np.where(in_t, d_t, 0.0), np.where(in_p, d_p, 0.0)


def silhouette_mv_grad(corr: MvCorrespondences, src_sil, dst_sil):
    """Cross-entropy-style silhouette agreement over valid correspondences:
    KL(source silhouette as target || bilinearly sampled target silhouette
    as prediction), i.e. the binary cross entropy minus the target entropy.

    Returns (value, l1_value, d_src_sil, d_dst_sil, d_uv, count). The
    Eq.-style L1 value is reported for monitoring; the KL value carries the
    gradient and is exactly 0 when the silhouettes agree (self-pairs). d_uv
    is the gradient w.r.t. the continuous target sample position (nonzero
    path only in rendered-source mode).
    """
    d_src = np.zeros_like(src_sil)
    d_dst = np.zeros_like(dst_sil)
    k = len(corr.pixels)
    if k == 0:
        return 0.0, 0.0, d_src, d_dst, np.zeros((0, 2)), 0
    t = src_sil[corr.pixels[:, 1], corr.pixels[:, 0]]
    ys4, xs4, ws4 = bilinear_weights(dst_sil.shape, corr.target_uv)
    p, p_du, p_dv = bilinear_spatial(dst_sil, corr.target_uv)

    v1, dt1, dp1 = _kl_pair(t, p)
    val = float(np.mean(v1))
    l1 = float(np.mean(np.abs(t - p)))
    dt = dt1 / k
    dp = dp1 / k
    np.add.at(d_src, (corr.pixels[:, 1], corr.pixels[:, 0]), dt)
    np.add.at(d_dst, (ys4, xs4), dp[:, None] * ws4)
    d_uv = np.stack([dp * p_du, dp * p_dv], axis=1)
    return val, l1, d_src, d_dst, d_uv, k


def depth_mv_grad(corr: MvCorrespondences, dst_depth, near: float, far: float):
    """L1 between reprojected depth and bilinearly sampled target depth,
    both normalized to [0,1] by scene near/far.

    Returns (value, d_dst_depth, d_zhat, d_uv, count)."""
    d_dst = np.zeros_like(dst_depth)
    k = len(corr.pixels)
    if k == 0:
        return 0.0, d_dst, np.zeros(0), np.zeros((0, 2)), 0
    span = max(far - near, 1e-12)
    ys4, xs4, ws4 = bilinear_weights(dst_depth.shape, corr.target_uv)
    dj, dj_du, dj_dv = bilinear_spatial(dst_depth, corr.target_uv)
    zn = (corr.zhat - near) / span
    dn = (dj - near) / span
    diff = zn - dn
    val = float(np.mean(np.abs(diff)))
    sgn = np.sign(diff)
    d_zhat = sgn / (k * span)
    d_dj = -sgn / (k * span)
    np.add.at(d_dst, (ys4, xs4), d_dj[:, None] * ws4)
    d_uv = np.stack([d_dj * dj_du, d_dj * dj_dv], axis=1)
    return val, d_dst, d_zhat, d_uv, k


def silhouette_mv(pairs, buffers: dict, cams: dict, masks: dict,
                  src_depths: dict | None = None, seed: int = 0,
                  silhouette_tolerance: float = 0.05,
                  occlusion_margin: float = None):
    """Spec-level op: mean silhouette consistency over (i, j) view pairs.

    buffers/cams/masks are keyed by view id; src_depths optionally supplies
    predicted source depth maps (rendered depth is used otherwise).
    """
    rng = np.random.default_rng(seed)
    vals, counts = [], 0
    for i, j in pairs:
        pix = sample_domain(masks[i], rng)
        dsrc = src_depths[i] if src_depths else buffers[i].depth
        corr = build_correspondences(cams[i], cams[j], pix, dsrc,
                                     buffers[j].silhouette, buffers[j].depth,
                                     silhouette_tolerance,
                                     rendered_source=src_depths is None,
                                     occlusion_margin=occlusion_margin)
        v, _, _, _, _, k = silhouette_mv_grad(corr, buffers[i].silhouette,
                                              buffers[j].silhouette)
        vals.append(v * k)
        counts += k
    return float(sum(vals) / counts) if counts else 0.0


def depth_mv(pairs, buffers: dict, cams: dict, masks: dict, near: float, far: float,
             src_depths: dict | None = None, seed: int = 0,
             silhouette_tolerance: float = 0.05, occlusion_margin: float = None):
    """Spec-level op: mean depth consistency over (i, j) view pairs."""
    rng = np.random.default_rng(seed)
    vals, counts = [], 0
    for i, j in pairs:
        pix = sample_domain(masks[i], rng)
        dsrc = src_depths[i] if src_depths else buffers[i].depth
        corr = build_correspondences(cams[i], cams[j], pix, dsrc,
                                     buffers[j].silhouette, buffers[j].depth,
                                     silhouette_tolerance,
                                     rendered_source=src_depths is None,
                                     occlusion_margin=occlusion_margin)
        v, _, _, _, k = depth_mv_grad(corr, buffers[j].depth, near, far)
        vals.append(v * k)
        counts += k
    return float(sum(vals) / counts) if counts else 0.0


def incident_samples(scene, rng: np.random.Generator, count: int = 1024):
    """Random (gaussian, unit direction) pairs for the visibility losses."""
    g = rng.integers(0, len(scene), size=count)
    d = rng.standard_normal((count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return g, d


def incident_loss(scene, samples):
    val, _, _ = incident_loss_grad(scene, samples)
    return val


def incident_loss_grad(scene, samples):
    """L1 between the clamped-cosine incident term and SH visibility.

    Returns (value, d_normal (n,3), d_sh (n,9))."""
    g, dirs = samples
    k = len(g)
    nrm = scene.normal[g]
    nn = np.linalg.norm(nrm, axis=1, keepdims=True)
    n_hat = nrm / np.maximum(nn, 1e-12)
    cos = np.sum(n_hat * dirs, axis=1)
    lbar = np.maximum(cos, 0.0)
    basis = sh_basis(dirs)
    raw = np.sum(scene.sh_visibility[g] * basis, axis=1)
    vsh = np.clip(raw, 0.0, 1.0)
    diff = lbar - vsh
    val = float(np.mean(np.abs(diff)))
    sgn = np.sign(diff) / k

    d_normal = np.zeros_like(scene.normal)
    d_sh = np.zeros_like(scene.sh_visibility)
    dcos = np.where(cos > 0, sgn, 0.0)
    dn_hat = dcos[:, None] * dirs
    dn = (dn_hat - n_hat * np.sum(n_hat * dn_hat, axis=1, keepdims=True)) / np.maximum(nn, 1e-12)
    np.add.at(d_normal, g, dn)
    draw = np.where((raw > 0) & (raw < 1), -sgn, 0.0)
    np.add.at(d_sh, g, draw[:, None] * basis)
    return val, d_normal, d_sh


def raytrace_targets(scene, samples):
    """Ground-truth transmittance per sample (stop-gradient target)."""
    from .shading import raytrace_visibility

    g, dirs = samples
    return np.array([raytrace_visibility(scene, scene.mu[gi], dirs[i], exclude=int(gi))
                     for i, gi in enumerate(g)])


def raytrace_targets_batch(scene, samples):
    """Vectorized raytrace_targets through the kernel backend.

    The whitening factor M3^{-1} (Sigma = M3 M3^T) turns the per-Gaussian
    quadratics into squared norms; the kernel integrates each half-line
    analytically.
    """
    from . import kernels
    from .mlp import sigmoid
    from .scene import covariance_factors

    g, dirs = samples
    k = len(g)
    if len(scene) == 0:
        return np.ones(k)
    _, _, M3 = covariance_factors(scene)
    M3inv = np.ascontiguousarray(np.linalg.inv(M3))
    taus = kernels.raytrace_taus(M3inv, np.ascontiguousarray(scene.mu),
                                 np.ascontiguousarray(sigmoid(scene.opacity_logit)),
                                 np.ascontiguousarray(scene.mu[g]),
                                 np.ascontiguousarray(dirs),
                                 np.ascontiguousarray(g, dtype=np.int64))
    return np.exp(-taus)


def raytrace_loss(scene, samples, targets):
    val, _ = raytrace_loss_grad(scene, samples, targets)
    return val


def raytrace_loss_grad(scene, samples, targets):
    """L1 between SH visibility and ray-traced targets; gradients reach only
    the SH coefficients."""
    g, dirs = samples
    k = len(g)
    basis = sh_basis(dirs)
    raw = np.sum(scene.sh_visibility[g] * basis, axis=1)
    vsh = np.clip(raw, 0.0, 1.0)
    diff = vsh - targets
    val = float(np.mean(np.abs(diff)))
    sgn = np.sign(diff) / k
    d_sh = np.zeros_like(scene.sh_visibility)
    draw = np.where((raw > 0) & (raw < 1), sgn, 0.0)
    np.add.at(d_sh, g, draw[:, None] * basis)
    return val, d_sh


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

TERM_KEYS = ("l1", "ssim", "mask", "smooth_metalness", "smooth_roughness",
             "smooth_subsurfaceness", "smooth_base_color", "enh", "ray",
             "sil_mv", "depth_mv", "normal", "incident", "sil_mv_l1")


def total_loss(terms: dict, weights: LossWeights, is_synthetic: bool = False) -> LossReport:
    """Weighted sum of all active terms; photometric terms are scaled by
    synthetic_alpha on synthetic frames while geometric terms keep full
    weight. Unsupplied terms contribute zero."""
    t = {k: float(terms.get(k, 0.0)) for k in TERM_KEYS}
    t["ssim"] = float(terms.get("ssim", 1.0))
    alpha = weights.synthetic_alpha if is_synthetic else 1.0
    weighted = {
        "l1": (1.0 - weights.lambda_dssim) * alpha * t["l1"],
        "dssim": weights.lambda_dssim * alpha * (1.0 - t["ssim"]),
        "mask": weights.lambda_mask * t["mask"],
        "smooth_metalness": weights.lambda_metallic_smooth * t["smooth_metalness"],
        "smooth_roughness": weights.lambda_roughness_smooth * t["smooth_roughness"],
        "smooth_subsurfaceness": weights.lambda_subsurfaceness_smooth * t["smooth_subsurfaceness"],
        "smooth_base_color": weights.lambda_base_color_smooth * t["smooth_base_color"],
        "enh": weights.lambda_enh * t["enh"],
        "ray": weights.lambda_ray * t["ray"],
        "sil_mv": weights.lambda_sil * t["sil_mv"],
        "depth_mv": weights.lambda_depth * t["depth_mv"],
        "normal": weights.lambda_normal * t["normal"],
        "incident": weights.lambda_incident_light * t["incident"],
    }
    report = LossReport(terms=dict(t), weighted=weighted,
                        total=float(sum(weighted.values())),
                        is_synthetic=is_synthetic)
    report.valid_counts = {k: int(terms[k]) for k in terms if k.endswith("_count")}
    if terms.get("no_valid_correspondences"):
        report.warnings.append("no-valid-correspondences")
    return report
