"""Evaluation metrics (PSNR, SSIM, mask IoU) and the held-out evaluation
driver with report and contact-sheet export."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import imgio, render, shading
from .errors import OverlappingSplit, ShapeMismatch
from .losses import ssim_grad

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray = None,
         cap: float = PSNR_CAP) -> float:
    """10*log10(1/MSE) over masked pixels; identical images hit the cap."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:2])
    msum = mask.sum()
    if msum <= 0:
        return cap
    mse = float(np.sum(mask[:, :, None] * (pred - gt) ** 2) / (3.0 * msum))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray = None) -> float:
    if mask is None:
        mask = np.ones(pred.shape[:2])
    val, _ = ssim_grad(pred, gt, mask)
    return val


def mask_iou(silhouette: np.ndarray, gt_mask: np.ndarray, thresh: float = 0.5) -> float:
    a = silhouette > thresh
    b = gt_mask > thresh
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class EvalReport:
    per_frame: list = field(default_factory=list)
    psnr_mean: float = 0.0
    ssim_mean: float = 0.0
    iou_mean: float = 0.0
    split_desc: str = ""
    metric_domain: str = "masked"
    runtime_s: float = 0.0

    def aggregate(self):
        if self.per_frame:
            self.psnr_mean = float(np.mean([f["psnr"] for f in self.per_frame]))
            self.ssim_mean = float(np.mean([f["ssim"] for f in self.per_frame]))
            self.iou_mean = float(np.mean([f["iou"] for f in self.per_frame]))

    def text(self) -> str:
        lines = [f"split {self.split_desc}",
                 f"metric_domain {self.metric_domain}",
                 f"frames {len(self.per_frame)}",
                 f"psnr_mean {self.psnr_mean:.6f}",
                 f"ssim_mean {self.ssim_mean:.6f}",
                 f"iou_mean {self.iou_mean:.6f}",
                 f"runtime_s {self.runtime_s:.3f}"]
        for f in self.per_frame:
            lines.append(f"frame {f['view']} {f['light']} psnr={f['psnr']:.6f} "
                         f"ssim={f['ssim']:.6f} iou={f['iou']:.6f}")
        return "\n".join(lines) + "\n"


def render_frame(scene, mlp, cam, light, center=None, extent=None):
    """Full forward render of one view under one light; returns (rgb, buffers)."""
    buf = render.rasterize(scene, cam)
    rgb, _ = shading.shade_image(buf, cam, light, mlp,
                                 scene.center if center is None else center,
                                 scene.extent if extent is None else extent)
    return np.clip(rgb, 0.0, 1.0), buf


def _error_heatmap(pred, gt):
    err = np.abs(pred - gt).mean(axis=2)
    h = np.clip(err / 0.25, 0.0, 1.0)
    heat = np.stack([h, 1.0 - np.abs(2 * h - 1.0), 1.0 - h], axis=2)
    return heat


def run_eval(scene, mlp, split_frames, cameras, train_frame_ids=None,
             allow_overlap: bool = False, metric_domain: str = "masked",
             out_dir=None, contact_sheets: bool = False,
             split_desc: str = "") -> EvalReport:
    """Render and score every held-out frame.

    Read-only on inputs; raises OverlappingSplit when a split frame id is in
    the training set (unless allow_overlap), ValueError on an empty split.
    """
    if len(split_frames) == 0:
        raise ValueError("empty evaluation split")
    if train_frame_ids is not None and not allow_overlap:
        train_set = set(train_frame_ids)
        clash = [f.frame_id for f in split_frames if f.frame_id in train_set]
        if clash:
            raise OverlappingSplit(f"{len(clash)} split frames appear in training "
                                   f"(first: {clash[0]})")
    report = EvalReport(split_desc=split_desc, metric_domain=metric_domain)
    t0 = time.perf_counter()
    sheets = []
    for f in split_frames:
        cam = cameras[f.view_id]
        pred, buf = render_frame(scene, mlp, cam, f.light)
        dom = f.mask if metric_domain == "masked" else np.ones_like(f.mask)
        entry = {"view": f.view_id, "light": f.light_id,
                 "psnr": psnr(pred, f.image, dom),
                 "ssim": ssim(pred, f.image, dom),
                 "iou": mask_iou(buf.silhouette, f.mask)}
        report.per_frame.append(entry)
        if contact_sheets and out_dir is not None:
            sheet = np.concatenate([f.image, pred, _error_heatmap(pred, f.image)], axis=1)
            sheets.append((f"sheet_v{f.view_id}_l{f.light_id}.png", sheet))
    report.runtime_s = time.perf_counter() - t0
    report.aggregate()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        produced = []
        with open(os.path.join(out_dir, "eval_report.txt"), "w", encoding="utf-8") as fh:
            fh.write(report.text())
        produced.append("eval_report.txt")
        for name, sheet in sheets:
            imgio.save_png(os.path.join(out_dir, name), np.clip(sheet, 0, 1))
            produced.append(name)
        with open(os.path.join(out_dir, "produced.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(produced) + "\n")
    return report
