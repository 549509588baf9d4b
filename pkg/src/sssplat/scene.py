"""Scene representation: anisotropic Gaussians with material and visibility
attributes, densification/pruning bookkeeping, and checkpoint io.

Parameters live in structure-of-arrays form on the Scene (one row per
Gaussian); the Gaussian dataclass is a convenience view for construction and
tests. Constrained quantities are stored unconstrained (logits, log-scales)
and mapped on use.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySource
from .mlp import SssMlp, sigmoid

LATENT_DIM = 8
SH_DIM = 9

# Eigenvalue clamp of the covariance, as fractions of the scene extent.
SIGMA_MIN_FRAC = 1e-6
SIGMA_MAX_FRAC = 0.5

PRUNE_OPACITY = 0.005

CHECKPOINT_MAGIC = b"SSSPLAT1"

PARAM_FIELDS = (
    ("mu", 3), ("scale_log", 3), ("quat", 4), ("opacity_logit", 1),
    ("albedo", 3), ("roughness_logit", 1), ("metalness_logit", 1),
    ("subsurfaceness_logit", 1), ("normal", 3), ("sh_visibility", SH_DIM),
    ("latent", LATENT_DIM),
)


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


def quat_to_rotation(quat: np.ndarray) -> np.ndarray:
    """Unit quaternions (n,4) wxyz -> rotation matrices (n,3,3)."""
    q = np.asarray(quat, dtype=np.float64)
    single = q.ndim == 1
    q = q[None, :] if single else q
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotation_quat_backward(quat: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR.

    Chains through the normalization q_hat = q/|q| analytically.
    """
    q = np.asarray(quat, dtype=np.float64)
    single = q.ndim == 1
    q = q[None, :] if single else q
    dR = dR[None, :, :] if single else dR
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zeros = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz for the normalized quaternion
    dRdw = 2 * np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1)], axis=1)
    dRdx = 2 * np.stack([
        np.stack([zeros, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=1)
    dRdy = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zeros, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    dRdz = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zeros], axis=-1)], axis=1)
    dqh = np.stack([np.einsum("nij,nij->n", dR, d) for d in (dRdw, dRdx, dRdy, dRdz)], axis=1)
    # through normalization
    dq = (dqh - qh * np.sum(dqh * qh, axis=1, keepdims=True)) / norm
    return dq[0] if single else dq


@dataclass
class Gaussian:
    """One splat primitive; field semantics follow the Scene arrays."""

    mu: np.ndarray
    scale_log: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    albedo: np.ndarray
    roughness_logit: float
    metalness_logit: float
    subsurfaceness_logit: float
    normal: np.ndarray
    sh_visibility: np.ndarray
    latent: np.ndarray


@dataclass
class Scene:
    """Growable Gaussian collection plus densification bookkeeping."""

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
    center: np.ndarray
    extent: float
    grad_accum: np.ndarray = None
    seen_count: np.ndarray = None
    iteration: int = 0
    revision: int = 0

    def __post_init__(self):
        n = len(self.mu)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.seen_count is None:
            self.seen_count = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self.mu)

    @property
    def sigma_min(self):
        return SIGMA_MIN_FRAC * self.extent

    @property
    def sigma_max(self):
        return SIGMA_MAX_FRAC * self.extent

    def opacity(self):
        return sigmoid(self.opacity_logit)

    def roughness(self):
        return sigmoid(self.roughness_logit)

    def metalness(self):
        return sigmoid(self.metalness_logit)

    def subsurfaceness(self):
        return sigmoid(self.subsurfaceness_logit)

    def unit_normals(self):
        n = np.linalg.norm(self.normal, axis=1, keepdims=True)
        return self.normal / np.maximum(n, 1e-12)

    def scales(self):
        """Per-axis standard deviations after the eigenvalue clamp."""
        return np.clip(np.exp(self.scale_log), self.sigma_min, self.sigma_max)

    def param_arrays(self):
        return {name: getattr(self, name) for name, _ in PARAM_FIELDS}

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i].copy(), self.scale_log[i].copy(), self.quat[i].copy(),
                        float(self.opacity_logit[i]), self.albedo[i].copy(),
                        float(self.roughness_logit[i]), float(self.metalness_logit[i]),
                        float(self.subsurfaceness_logit[i]), self.normal[i].copy(),
                        self.sh_visibility[i].copy(), self.latent[i].copy())

    def bump(self):
        """Mark a mutation; render buffers taken before this are stale."""
        self.revision += 1

    def normalize_constrained(self):
        """Renormalize quaternions/normals, clamp albedo; call after steps."""
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)
        nn = np.linalg.norm(self.normal, axis=1, keepdims=True)
        np.divide(self.normal, nn, out=self.normal, where=nn > 1e-12)
        np.clip(self.albedo, 0.0, 1.0, out=self.albedo)


def covariance(scene_or_g, index: int | None = None,
               sigma_min: float | None = None, sigma_max: float | None = None) -> np.ndarray:
    """3x3 world covariance(s): R diag(s^2) R^T with clamped scales.

    Accepts a Scene (returns (n,3,3); clamp bounds default to the scene's)
    or a standalone Gaussian (no clamp unless bounds are passed).
    """
    if isinstance(scene_or_g, Gaussian):
        g = scene_or_g
        R = quat_to_rotation(g.quat)
        s = np.exp(np.asarray(g.scale_log, dtype=np.float64))
        s = np.clip(s, sigma_min if sigma_min is not None else 0.0,
                    sigma_max if sigma_max is not None else np.inf)
        return (R * (s ** 2)[None, :]) @ R.T
    scene = scene_or_g
    R = quat_to_rotation(scene.quat)
    s = scene.scales()
    cov = (R * (s ** 2)[:, None, :]) @ np.transpose(R, (0, 2, 1))
    if index is not None:
        return cov[index]
    return cov


def covariance_factors(scene: Scene):
    """(R, s, M) with M = R diag(s); covariance = M M^T."""
    R = quat_to_rotation(scene.quat)
    s = scene.scales()
    M = R * s[:, None, :]
    return R, s, M


@dataclass
class DensifyReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    opacity_reset: bool = False
    keep: np.ndarray = None   # survivor mask over the pre-op rows
    added: int = 0            # rows appended after the survivors


def densify_and_prune(scene: Scene, cfg, rng: np.random.Generator) -> DensifyReport:
    """Clone/split high-gradient Gaussians, prune transparent ones.

    cfg needs: densify_from_iter, densify_until_iter, densification_interval,
    densify_grad_threshold, percent_dense, opacity_reset_interval,
    prune_opacity. Returns indices touched via the report; no-op outside the
    densification window.
    """
    report = DensifyReport()
    it = scene.iteration
    in_window = (cfg.densify_from_iter <= it <= cfg.densify_until_iter
                 and it % cfg.densification_interval == 0 and it > 0)
    if not in_window:
        return report

    mean_grad = np.where(scene.seen_count > 0, scene.grad_accum / np.maximum(scene.seen_count, 1), 0.0)
    hot = mean_grad > cfg.densify_grad_threshold
    # growth cap: densify at most densify_top_frac of the population per
    # event, picking the highest-pressure Gaussians first
    top_frac = getattr(cfg, "densify_top_frac", 1.0)
    max_new = max(1, int(top_frac * len(scene)))
    if hot.sum() > max_new:
        cutoff = np.partition(mean_grad, -max_new)[-max_new]
        hot &= mean_grad >= cutoff
    big = scene.scales().max(axis=1) > cfg.percent_dense * scene.extent
    clone_idx = np.where(hot & ~big)[0]
    split_idx = np.where(hot & big)[0]

    new_rows = {name: [] for name, _ in PARAM_FIELDS}
    for i in clone_idx:
        for name, _ in PARAM_FIELDS:
            new_rows[name].append(getattr(scene, name)[i].copy())
    report.cloned = len(clone_idx)

    # Split: two children sampled from the parent's own density, scales
    # shrunk by 1.6 (parent removed below).
    R = quat_to_rotation(scene.quat[split_idx]) if len(split_idx) else None
    for j, i in enumerate(split_idx):
        s = np.clip(np.exp(scene.scale_log[i]), scene.sigma_min, scene.sigma_max)
        for _ in range(2):
            local = rng.standard_normal(3) * s
            pos = scene.mu[i] + R[j] @ local
            for name, _ in PARAM_FIELDS:
                val = getattr(scene, name)[i].copy()
                new_rows[name].append(val)
            new_rows["mu"][-1] = pos
            new_rows["scale_log"][-1] = scene.scale_log[i] - np.log(1.6)
    report.split = len(split_idx)

    keep = sigmoid(scene.opacity_logit) >= cfg.prune_opacity
    keep[split_idx] = False
    report.pruned = int(np.sum(sigmoid(scene.opacity_logit) < cfg.prune_opacity))
    report.keep = keep
    report.added = len(new_rows["mu"])

    for name, width in PARAM_FIELDS:
        old = getattr(scene, name)[keep]
        if new_rows[name]:
            stacked = np.stack([np.atleast_1d(np.asarray(r, dtype=np.float64))
                                for r in new_rows[name]])
            if width == 1:
                merged = np.concatenate([old, stacked.reshape(-1)])
            else:
                merged = np.concatenate([old.reshape(-1, width),
                                         stacked.reshape(-1, width)], axis=0)
        else:
            merged = old.copy()
        setattr(scene, name, np.ascontiguousarray(merged))

    n = len(scene.mu)
    scene.grad_accum = np.zeros(n)
    scene.seen_count = np.zeros(n, dtype=np.int64)

    if (cfg.opacity_reset_interval > 0 and it % cfg.opacity_reset_interval == 0
            and it < getattr(cfg, "iterations", np.inf)):
        o = sigmoid(scene.opacity_logit)
        scene.opacity_logit = inverse_sigmoid(np.minimum(o, 0.01))
        report.opacity_reset = True

    scene.bump()
    return report


def init_scene(points: np.ndarray | None = None, n_random: int = 0,
               bounds: tuple = ((-1, -1, -1), (1, 1, 1)), seed: int = 0,
               extent: float | None = None) -> Scene:
    """Scene from a point cloud or n_random uniform samples in bounds.

    Isotropic scales come from the mean nearest-neighbor distance; material
    defaults: opacity .1, gray albedo, roughness .5, metalness 0,
    subsurfaceness .1, DC-only visibility.
    """
    rng = np.random.default_rng(seed)
    if points is None:
        if n_random <= 0:
            raise EmptySource("n_random must be positive when no points are given")
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
        pts = rng.uniform(lo, hi, size=(n_random, 3))
    else:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptySource("empty point cloud")
    n = len(pts)
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    ext = float(max(np.linalg.norm(pts - center, axis=1).max(), 1e-6)) if extent is None else extent

    if n > 1:
        # mean nearest-neighbor distance; O(n^2) is fine at desk scale
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        nn = np.sqrt(d2.min(axis=1))
        base = float(np.mean(nn))
    else:
        base = 0.1 * ext
    base = min(max(base, 1e-5 * ext), SIGMA_MAX_FRAC * ext * 0.99)

    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    normal = pts - center
    nn = np.linalg.norm(normal, axis=1, keepdims=True)
    normal = np.where(nn > 1e-9, normal / np.maximum(nn, 1e-12), np.array([0.0, 0.0, 1.0]))
    sh = np.zeros((n, SH_DIM))
    sh[:, 0] = 1.0
    scene = Scene(
        mu=pts.copy(),
        scale_log=np.full((n, 3), np.log(base)),
        quat=quat,
        opacity_logit=np.full(n, float(inverse_sigmoid(0.1))),
        albedo=np.full((n, 3), 0.5),
        roughness_logit=np.full(n, float(inverse_sigmoid(0.5))),
        metalness_logit=np.full(n, float(inverse_sigmoid(1e-4))),
        subsurfaceness_logit=np.full(n, float(inverse_sigmoid(0.1))),
        normal=normal,
        sh_visibility=sh,
        latent=rng.normal(0.0, 0.01, size=(n, LATENT_DIM)),
        center=center,
        extent=ext,
    )
    return scene


# ---------------------------------------------------------------------------
# Checkpoint io: binary little-endian, versioned header, per-Gaussian records
# in declaration order, MLP weights, then a JSON trailer for the rng state.
# A plain-text sidecar carries counts and the config hash.
# ---------------------------------------------------------------------------

def _pack_array(fh, arr):
    a = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<I", a.ndim))
    for d in a.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(a.tobytes())


def _unpack_array(fh):
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    a = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return a.astype(np.float64)


def save_checkpoint(path, scene: Scene, mlp: SssMlp | None = None, extra: dict | None = None,
                    config_hash: str = "", train_frame_ids=None):
    """Write scene (+optional MLP and extra float arrays) and the sidecar."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        meta = {
            "n": len(scene),
            "iteration": scene.iteration,
            "extent": scene.extent,
            "fields": [name for name, _ in PARAM_FIELDS],
            "mlp_dims": mlp.layer_dims if mlp is not None else None,
            "extra_keys": sorted(extra.keys()) if extra else [],
        }
        blob = json.dumps(meta).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _pack_array(fh, scene.center)
        for name, _ in PARAM_FIELDS:
            _pack_array(fh, getattr(scene, name))
        _pack_array(fh, scene.grad_accum)
        _pack_array(fh, scene.seen_count.astype(np.float64))
        if mlp is not None:
            for k in range(len(mlp.weights)):
                _pack_array(fh, mlp.weights[k])
                _pack_array(fh, mlp.biases[k])
        if extra:
            for key in sorted(extra.keys()):
                _pack_array(fh, extra[key])
    sidecar = path + ".txt"
    with open(sidecar, "w", encoding="utf-8") as fh:
        fh.write(f"gaussians {len(scene)}\n")
        fh.write(f"iteration {scene.iteration}\n")
        fh.write(f"config_hash {config_hash}\n")
        if train_frame_ids is not None:
            fh.write("train_frames " + " ".join(sorted(train_frame_ids)) + "\n")


def load_checkpoint(path):
    """Returns (scene, mlp_or_None, extra_dict, sidecar_dict)."""
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a scene checkpoint")
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode())
        center = _unpack_array(fh)
        fields = {}
        for name in meta["fields"]:
            fields[name] = _unpack_array(fh)
        grad_accum = _unpack_array(fh)
        seen = _unpack_array(fh).astype(np.int64)
        scene = Scene(center=center, extent=meta["extent"], **fields)
        scene.grad_accum = grad_accum
        scene.seen_count = seen
        scene.iteration = meta["iteration"]
        mlp = None
        if meta["mlp_dims"]:
            dims = meta["mlp_dims"]
            mlp = SssMlp(dims[0], dims[-1], hidden=dims[1], depth=len(dims) - 1)
            for k in range(len(mlp.weights)):
                mlp.weights[k] = _unpack_array(fh)
                mlp.biases[k] = _unpack_array(fh)
        extra = {}
        for key in meta["extra_keys"]:
            extra[key] = _unpack_array(fh)
    sidecar = {}
    try:
        with open(path + ".txt", "r", encoding="utf-8") as fh:
            for line in fh:
                tok = line.split()
                if tok:
                    sidecar[tok[0]] = tok[1:] if len(tok) > 2 else (tok[1] if len(tok) == 2 else "")
    except FileNotFoundError:
        pass
    return scene, mlp, extra, sidecar


def config_hash(cfg_text: str) -> str:
    return hashlib.sha256(cfg_text.encode()).hexdigest()[:16]
