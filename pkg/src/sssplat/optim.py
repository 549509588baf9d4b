"""Adam optimization with per-parameter-group learning rates, the 3DGS-style
exponential position schedule, densification driving, and the training loop.

compute_step builds the complete differentiable objective of one iteration
(render -> deferred shade -> all loss terms -> hand-written backward) for a
fixed stochastic context, so the finite-difference suites can differentiate
exactly the function the optimizer sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import losses as L
from . import render, shading
from .errors import NumericalError
from .mlp import SssMlp
from .scene import Scene, densify_and_prune, inverse_sigmoid, save_checkpoint

GROUP_LRS = {
    "mu": "position", "scale_log": "scaling_lr", "quat": "rotation_lr",
    "opacity_logit": "opacity_lr", "albedo": "base_color_lr",
    "roughness_logit": "roughness_lr", "metalness_logit": "metallic_lr",
    "subsurfaceness_logit": "subsurfaceness_lr", "normal": "normal_lr",
    "sh_visibility": "visibility_lr", "latent": "feature_lr",
}


@dataclass
class OptimConfig:
    """Optimizer / densification settings; field names mirror the config-file
    keys."""

    iterations: int = 10000
    batch_size: int = 4
    position_lr_init: float = 0.00016
    position_lr_final: float = 0.0000016
    position_lr_delay_mult: float = 0.01
    position_lr_delay_steps: int = 500
    position_lr_max_steps: int = 30000
    feature_lr: float = 0.0025
    opacity_lr: float = 0.05
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    normal_lr: float = 0.01
    base_color_lr: float = 0.01
    roughness_lr: float = 0.01
    metallic_lr: float = 0.01
    subsurfaceness_lr: float = 0.01
    visibility_lr: float = 0.0025
    sss_lr: float = 0.001
    light_lr: float = 0.001
    lr_decay_step: int = 50000
    lr_decay_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    percent_dense: float = 0.01
    densification_interval: int = 150
    opacity_reset_interval: int = 3000
    densify_from_iter: int = 500
    densify_until_iter: int = 10000
    densify_grad_threshold: float = 0.0010
    densify_top_frac: float = 0.05
    prune_opacity: float = 0.005
    random_background: bool = False
    checkpoint_interval: int = 1000
    mv_neighbors: int = 2
    max_correspondences: int = 4096
    mask_dilate: int = 8
    silhouette_tolerance: float = 0.05
    occlusion_margin_frac: float = 0.05   # of (far - near); target-view visibility check
    vis_samples: int = 1024
    mv_source_depth: str = "auto"   # auto | predicted-file | rendered
    enhance_k_sigmoid: float = 10.0
    disable_sss: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_lr") and isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be >= 0")


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
    """Bias-corrected Adam update in place; state holds m, v, t."""
    if param.shape != grad.shape:
        from .errors import ShapeMismatch
        raise ShapeMismatch(f"{param.shape} vs {grad.shape}")
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1 - beta2) * grad * grad
    m_hat = state["m"] / (1 - beta1 ** t)
    v_hat = state["v"] / (1 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, state


def new_adam_state(shape) -> dict:
    return {"m": np.zeros(shape), "v": np.zeros(shape), "t": 0}


def position_lr(iteration: int, cfg: OptimConfig) -> float:
    """Log-linear decay from init to final with a sine warm-up ramp."""
    if cfg.position_lr_init <= 0:
        return 0.0
    t = np.clip(iteration / max(cfg.position_lr_max_steps, 1), 0.0, 1.0)
    log_lerp = np.exp(np.log(cfg.position_lr_init) * (1 - t) + np.log(cfg.position_lr_final) * t)
    if cfg.position_lr_delay_steps > 0:
        p = np.clip(iteration / cfg.position_lr_delay_steps, 0.0, 1.0)
        delay = cfg.position_lr_delay_mult + (1 - cfg.position_lr_delay_mult) * np.sin(0.5 * np.pi * p)
    else:
        delay = 1.0
    return float(delay * log_lerp)


def group_lr(name: str, iteration: int, cfg: OptimConfig, extent: float) -> float:
    if name == "mu":
        lr = position_lr(iteration, cfg) * extent
    elif name == "mlp":
        lr = cfg.sss_lr
    else:
        lr = getattr(cfg, GROUP_LRS[name])
    if iteration >= cfg.lr_decay_step:
        lr *= cfg.lr_decay_factor
    return lr


class Optimizer:
    """Per-group Adam over the scene arrays plus the MLP flat vector."""

    def __init__(self, scene: Scene, mlp: SssMlp, cfg: OptimConfig):
        self.cfg = cfg
        self.states = {name: new_adam_state(getattr(scene, name).shape)
                       for name in GROUP_LRS}
        self.states["mlp"] = new_adam_state((mlp.num_params(),))

    def step(self, scene: Scene, mlp: SssMlp, grads: render.SceneGrads,
             mlp_grad: np.ndarray, iteration: int):
        cfg = self.cfg
        for name in GROUP_LRS:
            if cfg.disable_sss and name == "subsurfaceness_logit":
                continue
            lr = group_lr(name, iteration, cfg, scene.extent)
            adam_step(getattr(scene, name), getattr(grads, name), self.states[name],
                      lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        if not cfg.disable_sss:
            flat = mlp.flatten()
            adam_step(flat, mlp_grad, self.states["mlp"],
                      group_lr("mlp", iteration, cfg, scene.extent),
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            mlp.unflatten(flat)
        scene.normalize_constrained()
        scene.bump()

    def resize(self, keep: np.ndarray, n_added: int):
        """Mirror a densify/prune rebuild: keep rows, zero-init new ones."""
        for name in GROUP_LRS:
            st = self.states[name]
            for key in ("m", "v"):
                old = st[key][keep]
                pad = np.zeros((n_added,) + old.shape[1:])
                st[key] = np.concatenate([old, pad], axis=0)

    def state_arrays(self):
        out = {}
        for name, st in self.states.items():
            out[f"adam_{name}_m"] = st["m"]
            out[f"adam_{name}_v"] = st["v"]
            out[f"adam_{name}_t"] = np.array([float(st["t"])])
        return out

    def load_state_arrays(self, extra: dict):
        for name, st in self.states.items():
            if f"adam_{name}_m" in extra:
                st["m"] = extra[f"adam_{name}_m"].copy()
                st["v"] = extra[f"adam_{name}_v"].copy()
                st["t"] = int(extra[f"adam_{name}_t"][0])


# ---------------------------------------------------------------------------
# One-step objective: forward + full hand-written backward
# ---------------------------------------------------------------------------

@dataclass
class FrameContext:
    """A frame with its fixed per-step stochastic context."""

    cam: object
    image: np.ndarray
    mask: np.ndarray
    light: shading.OlatLight
    is_synthetic: bool = False
    view_id: str = ""
    predicted_depth: np.ndarray = None
    omega: np.ndarray = None          # (k,2) sampled source pixels
    neighbors: list = field(default_factory=list)   # neighbor view ids


@dataclass
class StepContext:
    """Everything stochastic about one optimization step, frozen."""

    frames: list
    cams: dict                        # view id -> Camera (all render views)
    vis_samples: tuple = None         # (gaussian idx, directions)
    vis_targets: np.ndarray = None    # ray-traced targets for those samples
    near: float = 0.1
    far: float = 10.0


def _demod(buffers):
    sil = buffers.silhouette
    fg = sil >= render.EPS_ALPHA
    A = np.where(fg, sil, 1.0)
    maps = {}
    for name, sl in (("metalness", render.METALNESS), ("roughness", render.ROUGHNESS),
                     ("subsurfaceness", render.SUBSURFACENESS)):
        maps[name] = np.where(fg, buffers.channels[:, :, sl] / A, 0.0)
    maps["base_color"] = np.where(fg[:, :, None], buffers.albedo / A[:, :, None], 0.0)
    return maps, fg, A


def _demod_backward(d_map, demod_map, fg, A, sl, bg: render.BufferGrads):
    if d_map.ndim == 2:
        bg.channels[:, :, sl] += np.where(fg, d_map / A, 0.0)
        bg.silhouette -= np.where(fg, demod_map * d_map / A, 0.0)
    else:
        bg.channels[:, :, sl] += np.where(fg[:, :, None], d_map / A[:, :, None], 0.0)
        bg.silhouette -= np.where(fg, np.sum(demod_map * d_map, axis=2) / A, 0.0)


def compute_step(scene: Scene, mlp: SssMlp, ctx: StepContext, weights: L.LossWeights,
                 cfg: OptimConfig, want_grads: bool = True):
    """Mean LossReport over the batch plus scene/MLP gradients.

    The stochastic context (frame batch, sampled pixels, visibility samples
    and their ray-traced targets, MV pairing) is fixed by ctx.
    """
    nb = len(ctx.frames)
    # render every needed view once
    needed = []
    for fc in ctx.frames:
        if fc.view_id not in needed:
            needed.append(fc.view_id)
        for nbid in fc.neighbors:
            if nbid not in needed:
                needed.append(nbid)
    buffers = {vid: render.rasterize(scene, ctx.cams[vid]) for vid in needed}

    buf_grads = {vid: render.BufferGrads(width=ctx.cams[vid].width, height=ctx.cams[vid].height)
                 for vid in needed}
    scene_grads = render.SceneGrads.zeros(len(scene))
    mlp_grad = np.zeros(mlp.num_params())
    reports = []

    # scene-level visibility terms, shared by every frame of the step
    vis_vals = (0.0, 0.0)
    vis_grads = None
    if ctx.vis_samples is not None:
        inc_v, d_nrm_inc, d_sh_inc = L.incident_loss_grad(scene, ctx.vis_samples)
        ray_v, d_sh_ray = L.raytrace_loss_grad(scene, ctx.vis_samples, ctx.vis_targets)
        vis_vals = (inc_v, ray_v)
        vis_grads = (d_nrm_inc, d_sh_inc, d_sh_ray)

    for fc in ctx.frames:
        buf = buffers[fc.view_id]
        cam = ctx.cams[fc.view_id]
        rgb, stape = shading.shade_image(buf, cam, fc.light, mlp, scene.center, scene.extent)

        terms = {}
        # photometric supervision over the full frame against the masked
        # ground truth composited on the black background: background pixels
        # penalize silhouette spill exactly like standard 3DGS training
        gt_eff = fc.image * fc.mask[:, :, None]
        full = np.ones_like(fc.mask)
        (l1, ssim_v), (dl1, dssim) = L.photometric_grad(rgb, gt_eff, full)
        terms["l1"], terms["ssim"] = l1, ssim_v
        mval, dsil_mask = L.mask_loss_grad(buf.silhouette, fc.mask)
        terms["mask"] = mval

        maps, fg, A = _demod(buf)
        smooth_grads = {}
        for name in ("metalness", "roughness", "subsurfaceness", "base_color"):
            sval, dmap = L.bilateral_smooth_grad(maps[name], fc.image, fc.mask)
            terms[f"smooth_{name}"] = sval
            smooth_grads[name] = dmap
        eval_, d_base_enh = L.enhance_loss_grad(maps["base_color"], fc.image, fc.mask,
                                                cfg.enhance_k_sigmoid)
        terms["enh"] = eval_
        nval, d_nbuf, d_dbuf = L.normal_consistency_grad(buf.normal, buf.depth, cam, fc.mask)
        terms["normal"] = nval

        # multi-view geometric terms over this frame's pairs
        sil_sum = depth_sum = sil_l1_sum = 0.0
        count_sum = 0
        mv_entries = []
        use_rendered = fc.predicted_depth is None
        src_depth = buf.depth if use_rendered else fc.predicted_depth
        margin = cfg.occlusion_margin_frac * (ctx.far - ctx.near)
        for nbid in fc.neighbors:
            nbuf = buffers[nbid]
            corr = L.build_correspondences(
                cam, ctx.cams[nbid], fc.omega, src_depth, nbuf.silhouette,
                nbuf.depth, cfg.silhouette_tolerance, rendered_source=use_rendered,
                occlusion_margin=margin)
            sv, sl1, d_ss, d_ds, d_uv_s, k = L.silhouette_mv_grad(
                corr, buf.silhouette, nbuf.silhouette)
            dv, d_dd, d_zh, d_uv_d, k2 = L.depth_mv_grad(corr, nbuf.depth, ctx.near, ctx.far)
            sil_sum += sv * k
            sil_l1_sum += sl1 * k
            depth_sum += dv * k
            count_sum += k
            mv_entries.append((nbid, corr, d_ss, d_ds, d_uv_s, d_dd, d_zh, d_uv_d, k))
        if count_sum > 0:
            terms["sil_mv"] = sil_sum / count_sum
            terms["sil_mv_l1"] = sil_l1_sum / count_sum
            terms["depth_mv"] = depth_sum / count_sum
        else:
            terms["sil_mv"] = terms["sil_mv_l1"] = terms["depth_mv"] = 0.0
            if fc.neighbors:
                terms["no_valid_correspondences"] = True
        terms["mv_valid_count"] = count_sum
        terms["incident"], terms["ray"] = vis_vals

        report = L.total_loss(terms, weights, fc.is_synthetic)
        reports.append(report)
        if not np.isfinite(report.total):
            raise NumericalError(f"non-finite loss at view {fc.view_id}")
        if not want_grads:
            continue

        alpha = weights.synthetic_alpha if fc.is_synthetic else 1.0
        # photometric -> rgb
        d_rgb = ((1 - weights.lambda_dssim) * alpha) * dl1 - (weights.lambda_dssim * alpha) * dssim
        sgrad_buf, mgrads = shading.shade_image_backward(stape, d_rgb)
        bg = buf_grads[fc.view_id]
        bg.channels += sgrad_buf.channels
        bg.silhouette += sgrad_buf.silhouette
        if mgrads is not None:
            mlp_grad += SssMlp.flatten_grads(mgrads)

        bg.silhouette += weights.lambda_mask * dsil_mask
        wsm = weights.smooth_weights()
        for name, sl in (("metalness", render.METALNESS), ("roughness", render.ROUGHNESS),
                         ("subsurfaceness", render.SUBSURFACENESS), ("base_color", render.ALBEDO)):
            d_map = wsm[name] * smooth_grads[name]
            if name == "base_color":
                d_map = d_map + weights.lambda_enh * d_base_enh
            _demod_backward(d_map, maps[name], fg, A, sl, bg)
        bg.channels[:, :, render.NORMAL] += weights.lambda_normal * d_nbuf
        bg.depth += weights.lambda_normal * d_dbuf

        if count_sum > 0:
            for nbid, corr, d_ss, d_ds, d_uv_s, d_dd, d_zh, d_uv_d, k in mv_entries:
                if k == 0:
                    continue
                scale = k / count_sum
                ws = weights.lambda_sil * scale
                wd = weights.lambda_depth * scale
                bg.silhouette += ws * d_ss
                buf_grads[nbid].silhouette += ws * d_ds
                buf_grads[nbid].depth += wd * d_dd
                if use_rendered:
                    d_uv = ws * d_uv_s + wd * d_uv_d
                    d_zhat = wd * d_zh
                    d_src = L.mv_source_depth_grad(corr, cam, ctx.cams[nbid], d_uv,
                                                   d_zhat, buf.depth.shape)
                    bg.depth += d_src

        if vis_grads is not None:
            d_nrm_inc, d_sh_inc, d_sh_ray = vis_grads
            scene_grads.normal += weights.lambda_incident_light * d_nrm_inc
            scene_grads.sh_visibility += weights.lambda_incident_light * d_sh_inc
            scene_grads.sh_visibility += weights.lambda_ray * d_sh_ray

    mean_total = float(np.mean([r.total for r in reports])) if reports else 0.0
    if not want_grads:
        return reports, mean_total, None, None

    # densification pressure is measured on the photometrically supervised
    # (primary) renders only, matching the usual 3DGS accumulation semantics
    primary = {fc.view_id for fc in ctx.frames}
    for vid in needed:
        g = render.rasterize_backward(scene, ctx.cams[vid], buffers[vid], buf_grads[vid],
                                      accumulate_densify=vid in primary)
        scene_grads.add(g)

    inv_b = 1.0 / max(nb, 1)
    for arr in scene_grads.arrays().values():
        arr *= inv_b
    mlp_grad *= inv_b
    return reports, mean_total, scene_grads, mlp_grad


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def camera_neighbors(cams: dict, center, k: int) -> dict:
    """k nearest other views by angular distance of camera centers around the
    scene center."""
    ids = sorted(cams)
    dirs = {}
    for vid in ids:
        d = cams[vid].camera_center - center
        dirs[vid] = d / max(np.linalg.norm(d), 1e-12)
    out = {}
    for vid in ids:
        angs = [(float(np.arccos(np.clip(np.dot(dirs[vid], dirs[o]), -1, 1))), o)
                for o in ids if o != vid]
        angs.sort()
        out[vid] = [o for _, o in angs[:k]]
    return out


def build_step_context(scene, mlp, frames, cams, cfg: OptimConfig, rng,
                       near, far, neighbor_table=None) -> StepContext:
    """Freeze one step's stochastic choices for the given frames."""
    if neighbor_table is None:
        train_cams = {f.view_id: cams[f.view_id] for f in frames}
        neighbor_table = camera_neighbors(train_cams, scene.center, cfg.mv_neighbors)
    fcs = []
    for f in frames:
        omega = L.sample_domain(f.mask, rng, cfg.max_correspondences, cfg.mask_dilate)
        pd = f.predicted_depth
        if cfg.mv_source_depth == "rendered":
            pd = None
        fcs.append(FrameContext(cam=cams[f.view_id], image=f.image, mask=f.mask,
                                light=f.light, is_synthetic=f.is_synthetic,
                                view_id=f.view_id, predicted_depth=pd, omega=omega,
                                neighbors=list(neighbor_table.get(f.view_id, []))))
    samples = L.incident_samples(scene, rng, cfg.vis_samples)
    targets = L.raytrace_targets_batch(scene, samples)
    return StepContext(frames=fcs, cams=cams, vis_samples=samples,
                       vis_targets=targets, near=near, far=far)


def train(scene: Scene, mlp: SssMlp, dataset, weights: L.LossWeights,
          cfg: OptimConfig, seed: int = 0, out_dir=None, optimizer: Optimizer = None,
          config_text: str = "", log_every: int = 1, quiet: bool = True):
    """Seeded training loop; returns (scene, mlp, metrics_lines).

    dataset provides .frames (each with view_id, image, mask, light,
    is_synthetic, predicted_depth), .cameras, .near, .far. Determinism: the
    per-iteration rng is derived statelessly from (seed, iteration), so a
    checkpoint resume replays the exact remaining schedule.
    """
    frames = dataset.frames
    if len(frames) == 0:
        raise NumericalError("empty dataset")
    cams = dataset.cameras
    if cfg.disable_sss:
        scene.subsurfaceness_logit[:] = inverse_sigmoid(1e-6)
        scene.bump()
    opt = optimizer or Optimizer(scene, mlp, cfg)
    lines = []

    train_view_ids = sorted({f.view_id for f in frames})
    train_cams = {vid: cams[vid] for vid in train_view_ids}
    neighbor_table = camera_neighbors(train_cams, scene.center, cfg.mv_neighbors)

    from .scene import config_hash
    chash = config_hash(config_text) if config_text else ""
    frame_ids = [f"{f.view_id}:{f.light_id}:{f.provenance}" for f in frames]

    start = scene.iteration + 1
    for it in range(start, cfg.iterations + 1):
        rng = np.random.default_rng([seed, it])
        idx = rng.choice(len(frames), size=min(cfg.batch_size, len(frames)), replace=False)
        batch = [frames[i] for i in idx]
        ctx = build_step_context(scene, mlp, batch, cams, cfg, rng,
                                 dataset.near, dataset.far, neighbor_table)
        reports, mean_total, sgrads, mgrad = compute_step(scene, mlp, ctx, weights, cfg)

        for name, arr in sgrads.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient in {name} at iteration {it}")

        scene.iteration = it
        opt.step(scene, mlp, sgrads, mgrad, it)

        if (cfg.densify_from_iter <= it <= cfg.densify_until_iter
                and it % cfg.densification_interval == 0):
            drng = np.random.default_rng([seed, it, 1])
            report = densify_and_prune(scene, cfg, drng)
            if report.keep is not None:
                opt.resize(report.keep, report.added)

        if it % log_every == 0:
            mean_report = _mean_report(reports)
            lines.append(mean_report.line(it))
        if out_dir is not None and (it % cfg.checkpoint_interval == 0 or it == cfg.iterations):
            save_checkpoint(f"{out_dir}/checkpoint_{it:06d}.bin", scene, mlp,
                            extra=opt.state_arrays(), config_hash=chash,
                            train_frame_ids=frame_ids)
    if out_dir is not None:
        with open(f"{out_dir}/metrics.log", "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    return scene, mlp, lines


def _mean_report(reports):
    if not reports:
        return L.LossReport()
    out = L.LossReport()
    keys = reports[0].terms.keys()
    out.terms = {k: float(np.mean([r.terms.get(k, 0.0) for r in reports])) for k in keys
                 if not isinstance(reports[0].terms.get(k), bool)}
    wkeys = reports[0].weighted.keys()
    out.weighted = {k: float(np.mean([r.weighted[k] for r in reports])) for k in wkeys}
    out.total = float(np.mean([r.total for r in reports]))
    for r in reports:
        out.warnings.extend(r.warnings)
    return out
