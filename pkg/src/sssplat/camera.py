"""Pinhole camera model: projection, depth back-projection, cross-view reprojection.

Depth convention everywhere: Euclidean distance from the camera center, not
camera-space z. The renderer's depth buffer and the reprojection machinery
share this convention so rendered and reprojected depths are directly
comparable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

# A reprojected point is treated as foreground when the bilinearly sampled
# target silhouette is at least this value.
SILHOUETTE_TOLERANCE = 0.05

VALID = "in-bounds"
OUT_OF_FRAME = "out-of-frame"
OUTSIDE_SILHOUETTE = "outside-silhouette"
INVALID_DEPTH = "invalid-depth"


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    rotation is orthonormal (checked to 1e-6); camera_center is the cached
    -R^T t. Pixel centers sit at integer coordinates.
    """

    view_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray   # (3,3) world -> camera
    translation: np.ndarray  # (3,)
    camera_center: np.ndarray = field(init=False)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError(f"camera {self.view_id}: rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.view_id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"camera {self.view_id}: principal point outside image")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "camera_center", -R.T @ t)

    @property
    def resolution(self):
        return (self.width, self.height)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (...,3) to camera space."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Correspondence:
    """One source pixel reprojected into a target view."""

    source_pixel: tuple
    target_pixel: tuple
    reprojected_depth: float
    valid: bool
    reason: str


def project(cam: Camera, point) -> tuple:
    """Project a world point; returns ((u, v), euclidean_depth).

    Raises BehindCamera when the camera-space z is not positive.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    pc = cam.rotation @ p + cam.translation
    if pc[2] <= 0.0:
        raise BehindCamera(f"point has camera-space z={pc[2]:.6g}")
    u = cam.fx * pc[0] / pc[2] + cam.cx
    v = cam.fy * pc[1] / pc[2] + cam.cy
    depth = float(np.linalg.norm(p - cam.camera_center))
    return (float(u), float(v)), depth


def back_project(cam: Camera, pixel, depth: float) -> np.ndarray:
    """Invert project: world point at the given pixel and Euclidean depth."""
    if depth <= 0.0:
        raise NonPositiveDepth(f"depth={depth!r}")
    u, v = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    d_world = cam.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return cam.camera_center + depth * d_world


def reproject(src: Camera, dst: Camera, pixel, src_depth: float,
              dst_silhouette: np.ndarray | None = None,
              silhouette_tolerance: float = SILHOUETTE_TOLERANCE) -> Correspondence:
    """Map a source pixel with known depth into the target view.

    Invalidity is encoded in the returned Correspondence, never raised:
    out-of-frame, outside-silhouette (bilinear sample of dst_silhouette below
    tolerance), or invalid-depth (point behind the target camera or bad
    source depth).
    """
    pixel = (float(pixel[0]), float(pixel[1]))
    if src_depth <= 0.0 or not np.isfinite(src_depth):
        return Correspondence(pixel, (np.nan, np.nan), 0.0, False, INVALID_DEPTH)
    point = back_project(src, pixel, src_depth)
    try:
        (u, v), depth = project(dst, point)
    except BehindCamera:
        return Correspondence(pixel, (np.nan, np.nan), 0.0, False, INVALID_DEPTH)
    target = (u, v)
    if not (0.0 <= u <= dst.width - 1.0 and 0.0 <= v <= dst.height - 1.0):
        return Correspondence(pixel, target, depth, False, OUT_OF_FRAME)
    if dst_silhouette is not None:
        s = bilinear_sample(dst_silhouette, np.array([[u, v]]))[0]
        if s < silhouette_tolerance:
            return Correspondence(pixel, target, depth, False, OUTSIDE_SILHOUETTE)
    return Correspondence(pixel, target, depth, True, VALID)


def bilinear_sample(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coords uv (n,2), clamped to bounds.

    img is (H,W) or (H,W,C); returns (n,) or (n,C).
    """
    h, w = img.shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(u), np.int64)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(v), np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fu = u - x0
    fv = v - y0
    if img.ndim == 2:
        vals = (img[y0, x0] * (1 - fu) * (1 - fv) + img[y0, x1] * fu * (1 - fv)
                + img[y1, x0] * (1 - fu) * fv + img[y1, x1] * fu * fv)
    else:
        fu = fu[:, None]
        fv = fv[:, None]
        vals = (img[y0, x0] * (1 - fu) * (1 - fv) + img[y0, x1] * fu * (1 - fv)
                + img[y1, x0] * (1 - fu) * fv + img[y1, x1] * fu * fv)
    return vals


def bilinear_weights(shape, uv: np.ndarray):
    """Neighbor indices and weights of a clamped bilinear lookup.

    Returns (ys, xs, ws): each (n,4). Used to scatter gradients back into the
    sampled buffer and to form spatial derivatives of the sample.
    """
    h, w = shape[:2]
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fu = u - x0
    fv = v - y0
    ys = np.stack([y0, y0, y1, y1], axis=1)
    xs = np.stack([x0, x1, x0, x1], axis=1)
    ws = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return ys, xs, ws


def load_cameras(path) -> dict:
    """Parse the plain-text camera file; see docs/dataset_format.md.

    One record per line:
    view <id> <W> <H> <fx> <fy> <cx> <cy> <r00..r22> <tx> <ty> <tz>
    """
    cams = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] != "view" or len(tok) != 20:
                raise ValueError(f"{path}:{lineno}: malformed camera record")
            vid = tok[1]
            w, h = int(tok[2]), int(tok[3])
            fx, fy, cx, cy = (float(x) for x in tok[4:8])
            R = np.array([float(x) for x in tok[8:17]]).reshape(3, 3)
            t = np.array([float(x) for x in tok[17:20]])
            cams[vid] = Camera(vid, w, h, fx, fy, cx, cy, R, t)
    return cams


def save_cameras(path, cams: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# view id W H fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n")
        for vid in sorted(cams):
            c = cams[vid]
            rvals = " ".join(repr(float(x)) for x in c.rotation.reshape(-1))
            tvals = " ".join(repr(float(x)) for x in c.translation)
            fh.write(f"view {vid} {c.width} {c.height} {c.fx!r} {c.fy!r} {c.cx!r} {c.cy!r} {rvals} {tvals}\n")


def look_at_camera(view_id: str, eye, target, up, width: int, height: int, focal: float) -> Camera:
    """Build a camera at eye looking at target (camera z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        upv = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return Camera(view_id, width, height, focal, focal,
                  (width - 1) / 2.0, (height - 1) / 2.0, R, t)
