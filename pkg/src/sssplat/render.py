"""Differentiable per-pixel alpha-compositing renderer.

rasterize projects each Gaussian with the first-order EWA approximation,
depth-sorts front-to-back, and composites geometry/material/latent G-buffers
consumed by the deferred shading pass. reference_rasterize is the brute-force
oracle (same contract, naive loop, compensated accumulation).
rasterize_backward reverse-differentiates the whole chain back to Gaussian
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imgio, kernels
from .errors import StaleBuffers
from .kernels import ALPHA_MAX, G_FLOOR, RADIUS_SIGMA, T_CUTOFF
from .mlp import sigmoid
from .scene import LATENT_DIM, SH_DIM, Scene, covariance_factors, quat_to_rotation, rotation_quat_backward

# Accumulated alpha below this renders as background (depth sentinel +inf).
EPS_ALPHA = 1e-4

# Camera-space near plane; Gaussians closer than this are culled per view.
Z_NEAR = 0.01

# Low-pass dilation added to the projected 2D covariance (pixels^2).
LOWPASS = 0.3

# Composited channel layout
ALBEDO = slice(0, 3)
ROUGHNESS = 3
METALNESS = 4
SUBSURFACENESS = 5
NORMAL = slice(6, 9)
LATENT = slice(9, 9 + LATENT_DIM)
VIS_SH = slice(17, 17 + SH_DIM)
POSITION = slice(26, 29)
COV6 = slice(29, 35)
N_CHANNELS = 35

_COV6_I = np.array([0, 0, 0, 1, 1, 2])
_COV6_J = np.array([0, 1, 2, 1, 2, 2])


@dataclass
class RenderBuffers:
    """Per-view rasterizer outputs. Attribute planes are premultiplied by the
    compositing weight (b(x) = sum_k T_k alpha_k b_k); shading demodulates."""

    width: int
    height: int
    channels: np.ndarray        # (H,W,35) composited attribute block
    silhouette: np.ndarray      # (H,W) accumulated alpha in [0,1]
    depth: np.ndarray           # (H,W) Euclidean-distance depth, +inf background
    depth_num: np.ndarray       # (H,W) alpha-weighted depth numerator
    contrib_count: np.ndarray   # (H,W) int32
    rgb: np.ndarray = None      # (H,W,3) filled by the deferred shading pass
    scene_tag: int = 0
    view_id: str = ""

    def __post_init__(self):
        if self.rgb is None:
            self.rgb = np.zeros((self.height, self.width, 3))

    @property
    def albedo(self):
        return self.channels[:, :, ALBEDO]

    @property
    def roughness(self):
        return self.channels[:, :, ROUGHNESS]

    @property
    def metalness(self):
        return self.channels[:, :, METALNESS]

    @property
    def subsurfaceness(self):
        return self.channels[:, :, SUBSURFACENESS]

    @property
    def normal(self):
        return self.channels[:, :, NORMAL]

    @property
    def latent(self):
        return self.channels[:, :, LATENT]

    @property
    def visibility_sh(self):
        return self.channels[:, :, VIS_SH]

    @property
    def position(self):
        return self.channels[:, :, POSITION]

    @property
    def cov6(self):
        return self.channels[:, :, COV6]

    def export_png(self, prefix):
        """Tone-mapped RGB and silhouette as 8-bit PNGs."""
        imgio.save_png(f"{prefix}_rgb.png", np.clip(self.rgb, 0.0, 1.0))
        imgio.save_png(f"{prefix}_silhouette.png", self.silhouette, linear=False)

    def export_f32(self, prefix):
        """Raw float dumps for the test suite: depth, normals, latent."""
        imgio.write_f32(f"{prefix}_depth.f32", self.depth)
        imgio.write_f32(f"{prefix}_normal.f32", self.normal)
        imgio.write_f32(f"{prefix}_latent.f32", self.latent)


@dataclass
class BufferGrads:
    """Upstream gradients per composited buffer channel (any may stay zero)."""

    width: int
    height: int
    channels: np.ndarray = None
    silhouette: np.ndarray = None
    depth: np.ndarray = None

    def __post_init__(self):
        if self.channels is None:
            self.channels = np.zeros((self.height, self.width, N_CHANNELS))
        if self.silhouette is None:
            self.silhouette = np.zeros((self.height, self.width))
        if self.depth is None:
            self.depth = np.zeros((self.height, self.width))


@dataclass
class SceneGrads:
    """Gradients w.r.t. every optimized per-Gaussian parameter."""

    mu: np.ndarray
    scale_log: np.ndarray
    quat: np.ndarray
    opacity_logit: np.ndarray
    albedo: np.ndarray
    roughness_logit: np.ndarray
    metalness_logit: np.ndarray
    subsurfaceness_logit: np.ndarray
    normal: np.ndarray
    sh_visibility: np.ndarray
    latent: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(mu=np.zeros((n, 3)), scale_log=np.zeros((n, 3)), quat=np.zeros((n, 4)),
                   opacity_logit=np.zeros(n), albedo=np.zeros((n, 3)),
                   roughness_logit=np.zeros(n), metalness_logit=np.zeros(n),
                   subsurfaceness_logit=np.zeros(n), normal=np.zeros((n, 3)),
                   sh_visibility=np.zeros((n, SH_DIM)), latent=np.zeros((n, LATENT_DIM)))

    def add(self, other):
        for name in vars(self):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def arrays(self):
        return {name: getattr(self, name) for name in vars(self)}


def gaussian_attributes(scene: Scene) -> np.ndarray:
    """Per-Gaussian composited attribute rows (N, 35)."""
    n = len(scene)
    attrs = np.empty((n, N_CHANNELS))
    attrs[:, ALBEDO] = scene.albedo
    attrs[:, ROUGHNESS] = sigmoid(scene.roughness_logit)
    attrs[:, METALNESS] = sigmoid(scene.metalness_logit)
    attrs[:, SUBSURFACENESS] = sigmoid(scene.subsurfaceness_logit)
    attrs[:, NORMAL] = scene.normal
    attrs[:, LATENT] = scene.latent
    attrs[:, VIS_SH] = scene.sh_visibility
    attrs[:, POSITION] = scene.mu
    _, _, M3 = covariance_factors(scene)
    cov = M3 @ np.transpose(M3, (0, 2, 1))
    attrs[:, COV6] = cov[:, _COV6_I, _COV6_J]
    return attrs


def project_gaussians(scene: Scene, cam):
    """EWA projection of all Gaussians into one view.

    Returns a tape dict holding every intermediate needed by the backward
    mapping; entries for culled Gaussians are unused.
    """
    W = cam.rotation
    pc = scene.mu @ W.T + cam.translation
    visible = pc[:, 2] > Z_NEAR
    z = np.where(visible, pc[:, 2], 1.0)
    x, y = pc[:, 0], pc[:, 1]

    mean2d = np.empty((len(scene), 2))
    mean2d[:, 0] = cam.fx * x / z + cam.cx
    mean2d[:, 1] = cam.fy * y / z + cam.cy

    J = np.zeros((len(scene), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)

    R3, s, M3 = covariance_factors(scene)
    cov3 = M3 @ np.transpose(M3, (0, 2, 1))
    M = J @ W
    cov2 = M @ cov3 @ np.transpose(M, (0, 2, 1))
    cov2[:, 0, 0] += LOWPASS
    cov2[:, 1, 1] += LOWPASS

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    ok = det > 1e-12
    visible = visible & ok
    det = np.where(ok, det, 1.0)
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radii = np.where(visible, RADIUS_SIGMA * np.sqrt(np.maximum(lam_max, 0.0)), 0.0)

    z_eucl = np.linalg.norm(scene.mu - cam.camera_center, axis=1)

    order = np.lexsort((scene.mu[:, 2], scene.mu[:, 1], scene.mu[:, 0], pc[:, 2]))
    order = order[visible[order]].astype(np.int64)

    opac = sigmoid(scene.opacity_logit)
    return {
        "cam": cam, "pc": pc, "visible": visible, "mean2d": mean2d, "J": J,
        "R3": R3, "s": s, "M3": M3, "cov3": cov3, "M": M, "cov2": cov2,
        "conics": np.ascontiguousarray(conics), "radii": radii, "z_eucl": z_eucl,
        "order": order, "opacity": opac,
    }


def _finalize_buffers(scene, cam, chan, alpha, znum, count):
    fg = alpha >= EPS_ALPHA
    depth = np.where(fg, znum / np.maximum(alpha, EPS_ALPHA), np.inf)
    return RenderBuffers(width=cam.width, height=cam.height, channels=chan,
                         silhouette=alpha, depth=depth, depth_num=znum,
                         contrib_count=count, scene_tag=scene.revision,
                         view_id=cam.view_id)


def rasterize(scene: Scene, cam) -> RenderBuffers:
    """Tiled front-to-back compositing through the active kernel backend."""
    tape = project_gaussians(scene, cam)
    attrs = gaussian_attributes(scene)
    chan, alpha, znum, count = kernels.composite_forward(
        tape["order"], np.ascontiguousarray(tape["mean2d"]), tape["conics"],
        np.ascontiguousarray(tape["opacity"]), np.ascontiguousarray(tape["z_eucl"]),
        np.ascontiguousarray(tape["radii"]), np.ascontiguousarray(attrs),
        cam.width, cam.height)
    return _finalize_buffers(scene, cam, chan, alpha, znum, count)


def reference_rasterize(scene: Scene, cam) -> RenderBuffers:
    """Naive O(pixels x gaussians) oracle: no tiling, no bounding boxes,
    Kahan-compensated accumulation; identical compositing contract."""
    tape = project_gaussians(scene, cam)
    attrs = gaussian_attributes(scene)
    H, Wd = cam.height, cam.width
    chan = np.zeros((H, Wd, N_CHANNELS))
    chan_c = np.zeros_like(chan)
    alpha_acc = np.zeros((H, Wd))
    alpha_c = np.zeros_like(alpha_acc)
    znum = np.zeros((H, Wd))
    znum_c = np.zeros_like(znum)
    count = np.zeros((H, Wd), dtype=np.int32)
    T = np.ones((H, Wd))
    px = np.arange(Wd, dtype=np.float64)[None, :]
    py = np.arange(H, dtype=np.float64)[:, None]
    inv_span = 1.0 / (1.0 - G_FLOOR)

    def kahan_add(acc, comp, val):
        y = val - comp
        tt = acc + y
        comp[...] = (tt - acc) - y
        acc[...] = tt

    for gi in tape["order"]:
        mx, my = tape["mean2d"][gi]
        A, B, C = tape["conics"][gi]
        dx = px - mx
        dy = py - my
        sig = 0.5 * (A * dx * dx + C * dy * dy) + B * dx * dy
        g = np.exp(-sig)
        t = np.clip((g - G_FLOOR) * inv_span, 0.0, 1.0)
        s = t * t * (3.0 - 2.0 * t)
        al = np.minimum(ALPHA_MAX, tape["opacity"][gi] * s)
        live = (T >= T_CUTOFF) & (al > 0.0)
        w = np.where(live, T * al, 0.0)
        kahan_add(chan, chan_c, w[:, :, None] * attrs[gi][None, None, :])
        kahan_add(alpha_acc, alpha_c, w)
        kahan_add(znum, znum_c, w * tape["z_eucl"][gi])
        count += live.astype(np.int32)
        T = np.where(live, T * (1.0 - al), T)
    return _finalize_buffers(scene, cam, chan, alpha_acc, znum, count)


def rasterize_backward(scene: Scene, cam, buffers: RenderBuffers, grads: BufferGrads,
                       accumulate_densify: bool = False) -> SceneGrads:
    """Map upstream buffer gradients back to Gaussian parameter gradients.

    buffers must come from rasterize on the identical scene revision
    (StaleBuffers otherwise). When accumulate_densify is set, the screen-space
    positional gradient norm is added to scene.grad_accum.
    """
    if buffers.scene_tag != scene.revision:
        raise StaleBuffers(f"buffers at revision {buffers.scene_tag}, scene at {scene.revision}")
    tape = project_gaussians(scene, cam)
    attrs = gaussian_attributes(scene)

    # depth = znum / max(alpha, eps) on foreground; fold its gradient into
    # the kernel-level znum/alpha gradients.
    fg = buffers.silhouette >= EPS_ALPHA
    denom = np.maximum(buffers.silhouette, EPS_ALPHA)
    d_znum = np.where(fg, grads.depth / denom, 0.0)
    d_alpha = grads.silhouette + np.where(fg, -grads.depth * buffers.depth_num / (denom * denom), 0.0)

    d_means2d, d_conics, d_opac, d_z, d_attrs = kernels.composite_backward(
        tape["order"], np.ascontiguousarray(tape["mean2d"]), tape["conics"],
        np.ascontiguousarray(tape["opacity"]), np.ascontiguousarray(tape["z_eucl"]),
        np.ascontiguousarray(tape["radii"]), np.ascontiguousarray(attrs),
        cam.width, cam.height,
        np.ascontiguousarray(buffers.channels), np.ascontiguousarray(buffers.silhouette),
        np.ascontiguousarray(buffers.depth_num),
        np.ascontiguousarray(grads.channels), np.ascontiguousarray(d_alpha),
        np.ascontiguousarray(d_znum))

    out = SceneGrads.zeros(len(scene))
    vis = tape["order"]
    if len(vis) == 0:
        return out

    # --- direct attribute channels ---
    out.albedo[vis] += d_attrs[vis][:, ALBEDO]
    r = sigmoid(scene.roughness_logit[vis])
    out.roughness_logit[vis] += d_attrs[vis][:, ROUGHNESS] * r * (1 - r)
    m = sigmoid(scene.metalness_logit[vis])
    out.metalness_logit[vis] += d_attrs[vis][:, METALNESS] * m * (1 - m)
    ss = sigmoid(scene.subsurfaceness_logit[vis])
    out.subsurfaceness_logit[vis] += d_attrs[vis][:, SUBSURFACENESS] * ss * (1 - ss)
    out.normal[vis] += d_attrs[vis][:, NORMAL]
    out.latent[vis] += d_attrs[vis][:, LATENT]
    out.sh_visibility[vis] += d_attrs[vis][:, VIS_SH]
    out.mu[vis] += d_attrs[vis][:, POSITION]

    o = tape["opacity"][vis]
    out.opacity_logit[vis] += d_opac[vis] * o * (1 - o)

    # --- Euclidean depth channel ---
    mu_c = scene.mu[vis] - cam.camera_center
    ze = np.maximum(tape["z_eucl"][vis], 1e-12)
    out.mu[vis] += d_z[vis][:, None] * mu_c / ze[:, None]

    # --- conic -> 2D covariance (full-matrix sensitivity) ---
    dc = d_conics[vis]
    dQ = np.empty((len(vis), 2, 2))
    dQ[:, 0, 0] = dc[:, 0]
    dQ[:, 0, 1] = dQ[:, 1, 0] = 0.5 * dc[:, 1]
    dQ[:, 1, 1] = dc[:, 2]
    Q = np.empty((len(vis), 2, 2))
    conics = tape["conics"][vis]
    Q[:, 0, 0] = conics[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = conics[:, 1]
    Q[:, 1, 1] = conics[:, 2]
    dS2 = -(Q @ dQ @ Q)

    # --- 2D covariance -> (M, Sigma3) with Sigma2 = M Sigma3 M^T ---
    M = tape["M"][vis]
    cov3 = tape["cov3"][vis]
    dM = 2.0 * (dS2 @ M @ cov3)
    dS3 = np.transpose(M, (0, 2, 1)) @ dS2 @ M

    # --- cov6 attribute channel -> Sigma3 ---
    dv = d_attrs[vis][:, COV6]
    dS3_attr = np.zeros((len(vis), 3, 3))
    for k, (i, j) in enumerate(zip(_COV6_I, _COV6_J)):
        if i == j:
            dS3_attr[:, i, j] += dv[:, k]
        else:
            dS3_attr[:, i, j] += 0.5 * dv[:, k]
            dS3_attr[:, j, i] += 0.5 * dv[:, k]
    dS3 = dS3 + dS3_attr

    # --- Sigma3 = M3 M3^T -> (scale_log, quaternion) ---
    M3 = tape["M3"][vis]
    R3 = tape["R3"][vis]
    s = tape["s"][vis]
    dM3 = 2.0 * (dS3 @ M3)
    ds = np.sum(R3 * dM3, axis=1)
    raw = np.exp(scene.scale_log[vis])
    unclipped = (raw > scene.sigma_min) & (raw < scene.sigma_max)
    out.scale_log[vis] += np.where(unclipped, ds * s, 0.0)
    dR = dM3 * s[:, None, :]
    out.quat[vis] += rotation_quat_backward(scene.quat[vis], dR)

    # --- M = J W -> J -> camera-space mean -> world mean ---
    Wr = cam.rotation
    dJ = dM @ Wr.T
    pc = tape["pc"][vis]
    xx, yy, zz = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / zz
    inv_z2 = inv_z * inv_z
    d_cam = np.zeros((len(vis), 3))
    d_cam[:, 0] += dJ[:, 0, 2] * (-cam.fx * inv_z2)
    d_cam[:, 1] += dJ[:, 1, 2] * (-cam.fy * inv_z2)
    d_cam[:, 2] += (dJ[:, 0, 0] * (-cam.fx * inv_z2) + dJ[:, 1, 1] * (-cam.fy * inv_z2)
                    + dJ[:, 0, 2] * (2.0 * cam.fx * xx * inv_z2 * inv_z)
                    + dJ[:, 1, 2] * (2.0 * cam.fy * yy * inv_z2 * inv_z))

    # --- projected mean -> camera-space mean ---
    dm = d_means2d[vis]
    d_cam[:, 0] += dm[:, 0] * cam.fx * inv_z
    d_cam[:, 1] += dm[:, 1] * cam.fy * inv_z
    d_cam[:, 2] += -(dm[:, 0] * cam.fx * xx + dm[:, 1] * cam.fy * yy) * inv_z2

    out.mu[vis] += d_cam @ Wr

    if accumulate_densify:
        screen = d_means2d[vis] * np.array([cam.width * 0.5, cam.height * 0.5])
        scene.grad_accum[vis] += np.linalg.norm(screen, axis=1)
        scene.seen_count[vis] += 1

    return out
