"""OLAT dataset ingestion, view-light pruning regimes, augmentation
ingestion with provenance tagging, and the synthetic fixture generator.

On-disk layout (see docs/dataset_format.md):
  root/manifest.txt   header key-value lines + "frame <view> <light> <image> [k=v...]"
  root/cameras.txt    camera records (camera module format)
  root/lights.txt     "light <id> <dx> <dy> <dz> <r> <g> <b>"
  root/images/v{view}_l{light}.png, root/masks/v{view}.png
  root/depth/v{view}.f32, root/normals/v{view}.f32  (optional)
  root/aug/{views,relit}/ with parallel manifests
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import imgio, render, shading
from .camera import Camera, load_cameras, look_at_camera, save_cameras
from .errors import CorruptImage, EmptySource, InconsistentResolution, MissingManifest, MissingPose
from .mlp import sigmoid
from .scene import Scene, init_scene, inverse_sigmoid
from .shading import OlatLight

REAL = "real"
SYNTH_VIEW = "synthetic-view"
SYNTH_RELIGHT = "synthetic-relight"

REGIMES = {
    "full": dict(view_fraction=1.0, light_fraction=1.0),
    "1light": dict(view_fraction=1.0, light_fraction=1.0, one_light_per_view=True),
    "5-5": dict(view_fraction=0.05, light_fraction=0.05),
    "3-3": dict(view_fraction=0.03, light_fraction=0.03),
    "5-full": dict(view_fraction=0.05, light_fraction=1.0),
    "3-full": dict(view_fraction=0.03, light_fraction=1.0),
}


@dataclass
class OlatFrame:
    """One (view, light) observation."""

    view_id: str
    light_id: str
    image: np.ndarray
    mask: np.ndarray
    light: OlatLight
    predicted_depth: np.ndarray = None
    predicted_normal: np.ndarray = None
    provenance: str = REAL

    @property
    def is_synthetic(self) -> bool:
        return self.provenance != REAL

    @property
    def frame_id(self) -> str:
        return f"{self.view_id}:{self.light_id}:{self.provenance}"


@dataclass
class PruneSpec:
    """Uniform-coverage view/light subsampling parameters.

    Counts follow max(1, round(fraction * table size)); the tables are the
    dataset's full camera and light sets, which makes pruning idempotent.
    """

    view_fraction: float = 1.0
    light_fraction: float = 1.0
    strategy: str = "uniform-coverage"
    seed: int = 0
    one_light_per_view: bool = False

    def __post_init__(self):
        if not (0 < self.view_fraction <= 1 and 0 < self.light_fraction <= 1):
            raise ValueError("fractions must lie in (0, 1]")


@dataclass
class OlatDataset:
    root: str
    frames: list
    cameras: dict
    lights: dict                      # light id -> OlatLight
    near: float
    far: float

    @property
    def view_ids(self):
        return sorted({f.view_id for f in self.frames})

    def check_unique(self):
        seen = set()
        for f in self.frames:
            key = (f.view_id, f.light_id, f.provenance)
            if key in seen:
                raise ValueError(f"duplicate frame {key}")
            seen.add(key)

    def add_frames(self, frames):
        self.frames = list(self.frames) + list(frames)
        self.check_unique()

    def summary(self) -> str:
        counts = {}
        for f in self.frames:
            counts[f.provenance] = counts.get(f.provenance, 0) + 1
        parts = [f"{len(self.cameras)} cameras", f"{len(self.lights)} lights"]
        for k in (REAL, SYNTH_VIEW, SYNTH_RELIGHT):
            if counts.get(k):
                parts.append(f"{counts[k]} {k} frames")
        return ", ".join(parts)


def _load_lights(path) -> dict:
    lights = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] != "light" or len(tok) != 8:
                raise ValueError(f"{path}:{lineno}: malformed light record")
            d = np.array([float(x) for x in tok[2:5]])
            d = d / np.linalg.norm(d)
            lights[tok[1]] = OlatLight(d, np.array([float(x) for x in tok[5:8]]))
    return lights


def _save_lights(path, lights: dict):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# light id dx dy dz r g b\n")
        for lid in sorted(lights):
            li = lights[lid]
            d = " ".join(repr(float(x)) for x in li.direction)
            r = " ".join(repr(float(x)) for x in li.radiance)
            fh.write(f"light {lid} {d} {r}\n")


def _parse_manifest(path):
    header = {}
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "frame":
                if len(tok) < 4:
                    raise ValueError(f"{path}:{lineno}: malformed frame record")
                extra = {}
                for t in tok[4:]:
                    k, _, v = t.partition("=")
                    extra[k] = v
                entries.append((tok[1], tok[2], tok[3], extra))
            else:
                header[tok[0]] = " ".join(tok[1:])
    return header, entries


def _load_frame_files(root, view, light, img_rel, extra, cameras, lights, provenance,
                      mask_cache, aux_cache):
    cam = cameras[view]
    img = imgio.load_png(os.path.join(root, img_rel))
    if img.ndim != 3:
        img = np.stack([img] * 3, axis=-1)
    if img.shape[:2] != (cam.height, cam.width):
        raise InconsistentResolution(
            f"{img_rel}: image {img.shape[:2]} vs camera {(cam.height, cam.width)}")

    mask_path = extra.get("mask", os.path.join("masks", f"v{view}.png"))
    mkey = os.path.join(root, mask_path)
    if mkey not in mask_cache:
        if os.path.exists(mkey):
            mask_cache[mkey] = (imgio.load_png(mkey, linear=False) > 0.5).astype(np.float64)
        else:
            # automatic background subtraction against the black background
            mask_cache[mkey] = (img.max(axis=2) > 0.01).astype(np.float64)
    mask = mask_cache[mkey]
    if mask.shape != (cam.height, cam.width):
        raise InconsistentResolution(f"{mask_path}: mask shape mismatch")

    def aux(kind):
        rel = extra.get(kind, os.path.join(kind, f"v{view}.f32"))
        key = os.path.join(root, rel)
        if key not in aux_cache:
            aux_cache[key] = imgio.read_f32(key) if os.path.exists(key) else None
        return aux_cache[key]

    return OlatFrame(view_id=view, light_id=light, image=img, mask=mask,
                     light=lights[light], predicted_depth=aux("depth"),
                     predicted_normal=aux("normals"), provenance=provenance)


def load_dataset(root) -> OlatDataset:
    """Parse the manifest and load every referenced frame."""
    root = str(root)
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise MissingManifest(f"no manifest.txt under {root}")
    header, entries = _parse_manifest(manifest)

    cam_path = os.path.join(root, header.get("cameras", "cameras.txt"))
    if not os.path.exists(cam_path):
        raise MissingManifest(f"no camera file {cam_path}")
    cameras = load_cameras(cam_path)
    if not cameras:
        raise EmptySource(f"{cam_path}: zero cameras")
    lights = _load_lights(os.path.join(root, header.get("lights", "lights.txt")))

    mask_cache, aux_cache = {}, {}
    frames = []
    for view, light, img_rel, extra in entries:
        if view not in cameras:
            raise MissingPose(f"frame references unknown view {view}")
        if light not in lights:
            raise MissingPose(f"frame references unknown light {light}")
        frames.append(_load_frame_files(root, view, light, img_rel, extra, cameras,
                                        lights, REAL, mask_cache, aux_cache))

    if "near" in header and "far" in header:
        near, far = float(header["near"]), float(header["far"])
    else:
        centers = np.array([c.camera_center for c in cameras.values()])
        centroid = centers.mean(axis=0)
        far = 2.0 * float(np.linalg.norm(centers - centroid, axis=1).max()) + 1.0
        near = far / 100.0
    ds = OlatDataset(root=root, frames=frames, cameras=cameras, lights=lights,
                     near=near, far=far)
    ds.check_unique()
    return ds


def ingest_augmentations(dataset: OlatDataset, aug_root, tag: str) -> list:
    """Load augmentation frames with provenance tagging.

    synthetic-view entries must supply their own camera records (MissingPose
    otherwise); synthetic-relight entries reuse the source view's camera and
    may introduce novel lights via their own lights.txt.
    """
    if tag not in (SYNTH_VIEW, SYNTH_RELIGHT):
        raise ValueError(f"unknown augmentation tag {tag!r}")
    aug_root = str(aug_root)
    manifest = os.path.join(aug_root, "manifest.txt")
    if not os.path.exists(manifest):
        raise MissingManifest(f"no manifest.txt under {aug_root}")
    _, entries = _parse_manifest(manifest)
    if not entries:
        return []

    cameras = dict(dataset.cameras)
    cam_path = os.path.join(aug_root, "cameras.txt")
    if os.path.exists(cam_path):
        cameras.update(load_cameras(cam_path))
    lights = dict(dataset.lights)
    light_path = os.path.join(aug_root, "lights.txt")
    if os.path.exists(light_path):
        lights.update(_load_lights(light_path))

    mask_cache, aux_cache = {}, {}
    frames = []
    for view, light, img_rel, extra in entries:
        if view not in cameras:
            raise MissingPose(f"{tag} entry references view {view} with no camera record")
        if tag == SYNTH_RELIGHT and view not in dataset.cameras:
            raise MissingPose(f"relit variant references unknown source view {view}")
        if light not in lights:
            raise MissingPose(f"{tag} entry references unknown light {light}")
        # relit variants reuse the source view's mask/depth/normals by default
        if tag == SYNTH_RELIGHT:
            src = next((f for f in dataset.frames if f.view_id == view), None)
            frame = _load_frame_files(aug_root, view, light, img_rel, extra,
                                      cameras, lights, tag, mask_cache, aux_cache)
            if src is not None:
                if "mask" not in extra:
                    frame.mask = src.mask
                frame.predicted_depth = frame.predicted_depth if frame.predicted_depth is not None else src.predicted_depth
                frame.predicted_normal = frame.predicted_normal if frame.predicted_normal is not None else src.predicted_normal
        else:
            frame = _load_frame_files(aug_root, view, light, img_rel, extra,
                                      cameras, lights, tag, mask_cache, aux_cache)
        frames.append(frame)
        dataset.cameras.setdefault(view, cameras[view])
        dataset.lights.setdefault(light, lights[light])
    return frames


# ---------------------------------------------------------------------------
# view-light pruning
# ---------------------------------------------------------------------------

def _round_count(fraction: float, n: int) -> int:
    return max(1, int(np.floor(fraction * n + 0.5)))


def _fps(points: np.ndarray, k: int) -> np.ndarray:
    """Farthest-point sampling with a deterministic start (farthest from the
    centroid, ties to the lowest index). Returns selected indices."""
    n = len(points)
    if k >= n:
        return np.arange(n)
    centroid = points.mean(axis=0)
    start = int(np.argmax(np.linalg.norm(points - centroid, axis=1)))
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(sorted(chosen))


def prune(dataset: OlatDataset, spec: PruneSpec) -> OlatDataset:
    """Uniform-coverage view/light subsampling over the full rig tables.

    Views are selected by farthest-point sampling on camera centers, then
    lights per kept view by farthest-point sampling on light directions (or
    one seeded round-robin light per view). Selection depends only on the
    camera/light tables, so prune(prune(d, s), s) == prune(d, s).
    """
    view_ids = sorted(dataset.cameras)
    light_ids = sorted(dataset.lights)
    n_views = _round_count(spec.view_fraction, len(view_ids))
    centers = np.array([dataset.cameras[v].camera_center for v in view_ids])
    kept_views = [view_ids[i] for i in _fps(centers, n_views)]

    if spec.one_light_per_view:
        rng = np.random.default_rng(spec.seed)
        perm = list(rng.permutation(light_ids))
        light_of = {v: {perm[i % len(perm)]} for i, v in enumerate(sorted(kept_views))}
    else:
        n_lights = _round_count(spec.light_fraction, len(light_ids))
        dirs = np.array([dataset.lights[l].direction for l in light_ids])
        kept_lights = {light_ids[i] for i in _fps(dirs, n_lights)}
        light_of = {v: kept_lights for v in kept_views}

    kept_set = set(kept_views)
    frames = [f for f in dataset.frames
              if f.view_id in kept_set and f.light_id in light_of[f.view_id]]
    return OlatDataset(root=dataset.root, frames=frames, cameras=dataset.cameras,
                       lights=dataset.lights, near=dataset.near, far=dataset.far)


def split_dataset(dataset: OlatDataset, holdout_views: list) -> tuple:
    """(train, heldout) split by view id."""
    hv = set(holdout_views)
    train = [f for f in dataset.frames if f.view_id not in hv]
    test = [f for f in dataset.frames if f.view_id in hv]
    mk = lambda fr: OlatDataset(root=dataset.root, frames=fr, cameras=dataset.cameras,
                                lights=dataset.lights, near=dataset.near, far=dataset.far)
    return mk(train), mk(test)


# ---------------------------------------------------------------------------
# synthetic fixture generator
# ---------------------------------------------------------------------------

def _fibonacci_sphere(n: int, seed: int = 0) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    golden = np.pi * (1.0 + np.sqrt(5.0))
    theta = golden * i
    return np.stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def make_sphere_scene(n_points: int = 700, radius: float = 0.8, seed: int = 0,
                      albedo=(0.74, 0.71, 0.66), sss_logit: float = None) -> Scene:
    """Gaussians tiling a sphere surface with outward normals."""
    pts = _fibonacci_sphere(n_points) * radius
    scene = init_scene(points=pts, seed=seed)
    spacing = np.sqrt(4.0 * np.pi * radius * radius / n_points)
    scene.scale_log[:] = np.log(0.6 * spacing)
    scene.quat[:] = np.array([1.0, 0.0, 0.0, 0.0])
    scene.opacity_logit[:] = inverse_sigmoid(0.97)
    scene.albedo[:] = np.asarray(albedo)
    scene.roughness_logit[:] = inverse_sigmoid(0.9)
    scene.metalness_logit[:] = inverse_sigmoid(1e-3)
    scene.subsurfaceness_logit[:] = sss_logit if sss_logit is not None else inverse_sigmoid(1e-6)
    scene.normal[:] = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    scene.sh_visibility[:, 0] = 1.0
    scene.bump()
    return scene


def make_blob_scene(n: int = 40, seed: int = 0) -> Scene:
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, 0.25, size=(n, 3))
    scene = init_scene(points=pts, seed=seed)
    scene.opacity_logit[:] = inverse_sigmoid(rng.uniform(0.3, 0.9, n))
    scene.scale_log[:] = np.log(rng.uniform(0.05, 0.15, (n, 3)))
    scene.albedo[:] = rng.uniform(0.2, 0.9, (n, 3))
    scene.roughness_logit[:] = inverse_sigmoid(rng.uniform(0.3, 0.95, n))
    scene.normal[:] = rng.normal(size=(n, 3))
    scene.normal /= np.linalg.norm(scene.normal, axis=1, keepdims=True)
    scene.bump()
    return scene


DIPOLE_COLOR = np.array([0.90, 0.32, 0.22])
DIPOLE_STRENGTH = 0.45
DIPOLE_WRAP = 0.6


def dipole_glow(n_dot_l: np.ndarray) -> np.ndarray:
    """Radially symmetric diffusion profile of the terminator angle: a
    wrap-lighting lobe that leaks past n.l = 0 into the geometric shadow."""
    wrapped = np.clip((n_dot_l + DIPOLE_WRAP) / (1.0 + DIPOLE_WRAP), 0.0, 1.0)
    return DIPOLE_STRENGTH * wrapped * wrapped


def generate_synthetic_scene(out_dir, object_kind: str = "lambertian-sphere",
                             views: int = 20, lights: int = 8, resolution: int = 64,
                             seed: int = 0, n_points: int = 700):
    """Render a ground-truth scene into a full dataset layout on disk.

    Returns (dataset, gt_scene). Images come from the reference renderer plus
    deferred shading; dipole-sphere adds the analytic subsurface profile on
    top of the Lambertian sphere. Exact depth/normal maps are written as the
    'predicted' maps, and the ground-truth point cloud as points.txt.
    """
    if views < 1 or lights < 1:
        raise ValueError("views and lights must be >= 1")
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "masks", "depth", "normals"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    if object_kind == "gaussian-blob":
        gt = make_blob_scene(seed=seed)
    elif object_kind == "lambertian-sphere":
        gt = make_sphere_scene(n_points=n_points, seed=seed)
    elif object_kind == "dipole-sphere":
        gt = make_sphere_scene(n_points=n_points, seed=seed)
    else:
        raise ValueError(f"unknown object kind {object_kind!r}")

    radius = gt.extent
    dist = 3.2 * radius
    focal = 0.8 * resolution
    cam_dirs = _fibonacci_sphere(views)
    cameras = {}
    for i, d in enumerate(cam_dirs):
        vid = f"{i:04d}"
        cameras[vid] = look_at_camera(vid, eye=d * dist, target=(0, 0, 0),
                                      up=(0, 0, 1), width=resolution,
                                      height=resolution, focal=focal)

    rng = np.random.default_rng(seed + 7)
    rot = _random_rotation(rng)
    light_dirs = _fibonacci_sphere(lights) @ rot.T
    light_tbl = {f"{i:03d}": OlatLight(light_dirs[i] / np.linalg.norm(light_dirs[i]),
                                       np.array([2.8, 2.8, 2.8]))
                 for i in range(lights)}

    mlp = shading.make_sss_mlp(seed=seed)
    near = dist - 1.6 * radius
    far = dist + 1.6 * radius

    manifest_lines = [f"near {float(near)!r}", f"far {float(far)!r}"]
    for vid in sorted(cameras):
        cam = cameras[vid]
        buf = render.reference_rasterize(gt, cam)
        mask = (buf.silhouette > 0.5).astype(np.float64)
        imgio.save_png(os.path.join(out_dir, "masks", f"v{vid}.png"), mask, linear=False)
        imgio.write_f32(os.path.join(out_dir, "depth", f"v{vid}.f32"), buf.depth)
        fgm = buf.silhouette >= render.EPS_ALPHA
        nrm = np.where(fgm[:, :, None], buf.normal, 0.0)
        nn = np.linalg.norm(nrm, axis=2, keepdims=True)
        nrm = np.where(nn > 1e-9, nrm / np.maximum(nn, 1e-12), 0.0)
        imgio.write_f32(os.path.join(out_dir, "normals", f"v{vid}.f32"), nrm)
        for lid in sorted(light_tbl):
            li = light_tbl[lid]
            rgb, _ = shading.shade_image(buf, cam, li, mlp, gt.center, gt.extent)
            if object_kind == "dipole-sphere":
                ndl = np.sum(nrm * li.direction[None, None, :], axis=2)
                glow = dipole_glow(ndl)[:, :, None] * DIPOLE_COLOR[None, None, :]
                rgb = rgb + buf.silhouette[:, :, None] * glow * fgm[:, :, None]
            rel = os.path.join("images", f"v{vid}_l{lid}.png")
            imgio.save_png(os.path.join(out_dir, rel), np.clip(rgb, 0.0, 1.0))
            manifest_lines.append(f"frame {vid} {lid} {rel}")

    save_cameras(os.path.join(out_dir, "cameras.txt"), cameras)
    _save_lights(os.path.join(out_dir, "lights.txt"), light_tbl)
    with open(os.path.join(out_dir, "points.txt"), "w", encoding="utf-8") as fh:
        for p in gt.mu:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest_lines) + "\n")

    return load_dataset(out_dir), gt


def _random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    from .scene import quat_to_rotation
    return quat_to_rotation(q)


def load_points(path) -> np.ndarray:
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if len(tok) == 3:
                pts.append([float(x) for x in tok])
    return np.array(pts)


def write_pruned(dataset: OlatDataset, out_dir, source_root=None):
    """Write a manifest for a pruned dataset referencing the source files."""
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    src = os.path.abspath(source_root or dataset.root)
    lines = [f"near {float(dataset.near)!r}", f"far {float(dataset.far)!r}"]
    for f in dataset.frames:
        img = os.path.join(src, "images", f"v{f.view_id}_l{f.light_id}.png")
        mask = os.path.join(src, "masks", f"v{f.view_id}.png")
        extras = [f"mask={mask}"]
        for kind in ("depth", "normals"):
            p = os.path.join(src, kind, f"v{f.view_id}.f32")
            if os.path.exists(p):
                extras.append(f"{kind}={p}")
        lines.append(f"frame {f.view_id} {f.light_id} {img} " + " ".join(extras))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    save_cameras(os.path.join(out_dir, "cameras.txt"), dataset.cameras)
    _save_lights(os.path.join(out_dir, "lights.txt"), dataset.lights)
