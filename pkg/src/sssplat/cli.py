"""Command-line surface: synth, prune, train, render, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import dataset as ds
from . import metrics, optim, shading
from .errors import NumericalError, SssplatError
from .scene import init_scene, load_checkpoint, save_checkpoint, config_hash

log = logging.getLogger("sssplat")


def _build_parser():
    p = argparse.ArgumentParser(prog="sssplat",
                                description="Relightable Gaussian splatting for translucent objects")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for array backends (kernels are single-threaded)")
    p.add_argument("--log-level", default="warning",
                   choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic OLAT dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--object", default="lambertian-sphere",
                    choices=["gaussian-blob", "lambertian-sphere", "dipole-sphere"])
    sp.add_argument("--views", type=int, default=20)
    sp.add_argument("--lights", type=int, default=8)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--points", type=int, default=700)
    sp.add_argument("--seed", type=int, default=0)

    pp = sub.add_parser("prune", help="apply a view-light capture regime")
    pp.add_argument("--dataset", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--regime", required=True, choices=sorted(ds.REGIMES))
    pp.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train", help="optimize a scene on an OLAT dataset")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--scene-init", default="points",
                    help="points | points:<file> | random:<N> | checkpoint:<file>")
    tp.add_argument("--config", help="key-value config file")
    tp.add_argument("--weights-preset", default="tuned", choices=cfgmod.PRESETS)
    tp.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                    help="override one resolved config entry")
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--holdout-views", default="",
                    help="comma-separated view ids excluded from training")
    tp.add_argument("--aug-views", help="synthetic-view augmentation directory")
    tp.add_argument("--aug-relit", help="synthetic-relight augmentation directory")
    tp.add_argument("--disable-sss", action="store_true")

    rp = sub.add_parser("render", help="render one view under one light")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--view", required=True)
    rp.add_argument("--light", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--buffers", action="store_true", help="also dump raw f32 buffers")

    ep = sub.add_parser("eval", help="evaluate a checkpoint on held-out frames")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--dataset", required=True)
    ep.add_argument("--split", required=True,
                    help="'views:<id,id,...>' or 'regime:<name>' held-out selector")
    ep.add_argument("--out")
    ep.add_argument("--allow-overlap", action="store_true")
    ep.add_argument("--metric-domain", default="masked", choices=["masked", "full"])
    ep.add_argument("--sheets", action="store_true")
    return p


def _resolve_split(dataset, split: str):
    kind, _, arg = split.partition(":")
    if kind == "views":
        ids = [v.strip() for v in arg.split(",") if v.strip()]
        _, held = ds.split_dataset(dataset, ids)
        return held.frames, f"views:{','.join(ids)}"
    if kind == "regime":
        kept = ds.prune(dataset, ds.PruneSpec(**ds.REGIMES[arg]))
        kept_ids = {f.frame_id for f in kept.frames}
        held = [f for f in dataset.frames if f.frame_id not in kept_ids]
        return held, f"regime-complement:{arg}"
    raise ValueError(f"bad --split selector {split!r}")


def _scene_from_init(spec: str, dataset, seed: int):
    kind, _, arg = spec.partition(":")
    if kind == "points":
        path = arg or os.path.join(dataset.root, "points.txt")
        pts = ds.load_points(path)
        if len(pts) == 0:
            raise SssplatError(f"no points in {path}")
        return init_scene(points=pts, seed=seed), None
    if kind == "random":
        n = int(arg or 1000)
        centers = np.array([c.camera_center for c in dataset.cameras.values()])
        axes = np.array([c.rotation[2] for c in dataset.cameras.values()])
        mid = 0.5 * (dataset.near + dataset.far)
        target = (centers + axes * mid).mean(axis=0)
        radius = max((dataset.far - dataset.near) / 3.2, 1e-3)
        lo, hi = target - radius, target + radius
        return init_scene(n_random=n, bounds=(lo, hi), seed=seed), None
    if kind == "checkpoint":
        scene, mlp, extra, _ = load_checkpoint(arg)
        return scene, (mlp, extra)
    raise ValueError(f"bad --scene-init {spec!r}")


def _cmd_synth(args):
    dataset, _ = ds.generate_synthetic_scene(args.out, args.object, args.views,
                                             args.lights, args.resolution, args.seed,
                                             n_points=args.points)
    print(f"wrote {args.out}: {dataset.summary()}")
    return 0


def _cmd_prune(args):
    dataset = ds.load_dataset(args.dataset)
    spec = ds.PruneSpec(seed=args.seed, **ds.REGIMES[args.regime])
    pruned = ds.prune(dataset, spec)
    ds.write_pruned(pruned, args.out, source_root=args.dataset)
    views = len({f.view_id for f in pruned.frames})
    print(f"regime {args.regime}: kept {views} views, {len(pruned.frames)} frames -> {args.out}")
    return 0


def _cmd_train(args):
    dataset = ds.load_dataset(args.dataset)
    if args.aug_views:
        dataset.add_frames(ds.ingest_augmentations(dataset, args.aug_views, ds.SYNTH_VIEW))
    if args.aug_relit:
        dataset.add_frames(ds.ingest_augmentations(dataset, args.aug_relit, ds.SYNTH_RELIGHT))
    holdout = [v for v in args.holdout_views.split(",") if v]
    train_ds, _ = ds.split_dataset(dataset, holdout) if holdout else (dataset, None)

    weights, cfg = cfgmod.preset(args.weights_preset)
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            weights, cfg = cfgmod.parse_config(fh.read(), weights, cfg)
    cfgmod.apply_overrides(weights, cfg, args.overrides)
    if args.disable_sss:
        cfg.disable_sss = True

    scene, restored = _scene_from_init(args.scene_init, dataset, args.seed)
    mlp = shading.make_sss_mlp(seed=args.seed)
    opt = optim.Optimizer(scene, mlp, cfg)
    if restored is not None:
        mlp = restored[0] or mlp
        opt = optim.Optimizer(scene, mlp, cfg)
        opt.load_state_arrays(restored[1])

    os.makedirs(args.out, exist_ok=True)
    resolved = cfgmod.dump_config(weights, cfg)
    with open(os.path.join(args.out, "resolved_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(resolved)
    print(resolved, end="")

    optim.train(scene, mlp, train_ds, weights, cfg, seed=args.seed,
                out_dir=args.out, optimizer=opt, config_text=resolved)
    final = os.path.join(args.out, "checkpoint_final.bin")
    save_checkpoint(final, scene, mlp, extra=opt.state_arrays(),
                    config_hash=config_hash(resolved),
                    train_frame_ids=[f.frame_id for f in train_ds.frames])
    print(f"trained {cfg.iterations} iterations -> {final}")
    return 0


def _cmd_render(args):
    scene, mlp, _, _ = load_checkpoint(args.checkpoint)
    if mlp is None:
        mlp = shading.make_sss_mlp()
    dataset = ds.load_dataset(args.dataset)
    if args.view not in dataset.cameras:
        raise SssplatError(f"unknown view {args.view}")
    if args.light not in dataset.lights:
        raise SssplatError(f"unknown light {args.light}")
    cam = dataset.cameras[args.view]
    rgb, buf = metrics.render_frame(scene, mlp, cam, dataset.lights[args.light])
    buf.rgb = rgb
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    from . import imgio
    imgio.save_png(args.out, rgb)
    if args.buffers:
        prefix = os.path.splitext(args.out)[0]
        buf.export_png(prefix)
        buf.export_f32(prefix)
    print(f"rendered view {args.view} light {args.light} -> {args.out}")
    return 0


def _cmd_eval(args):
    scene, mlp, _, sidecar = load_checkpoint(args.checkpoint)
    if mlp is None:
        mlp = shading.make_sss_mlp()
    dataset = ds.load_dataset(args.dataset)
    frames, desc = _resolve_split(dataset, args.split)
    train_ids = sidecar.get("train_frames")
    if isinstance(train_ids, str):
        train_ids = [train_ids]
    report = metrics.run_eval(scene, mlp, frames, dataset.cameras,
                              train_frame_ids=train_ids,
                              allow_overlap=args.allow_overlap,
                              metric_domain=args.metric_domain,
                              out_dir=args.out, contact_sheets=args.sheets,
                              split_desc=desc)
    print(report.text(), end="")
    return 0


COMMANDS = {"synth": _cmd_synth, "prune": _cmd_prune, "train": _cmd_train,
            "render": _cmd_render, "eval": _cmd_eval}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (SssplatError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
