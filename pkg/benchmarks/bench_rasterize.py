"""Benchmark the compiled compositing kernels against the numpy fallback.

Run:  python3 benchmarks/bench_rasterize.py [--sizes 32,64,128] [--gaussians 200,700,2000]
"""

import argparse
import time

import numpy as np

from sssplat import render
from sssplat.camera import look_at_camera
from sssplat.kernels import get_backend
from sssplat.scene import init_scene


def make_scene(n, seed=0):
    rng = np.random.default_rng(seed)
    scene = init_scene(n_random=n, bounds=((-0.5,) * 3, (0.5,) * 3), seed=seed)
    scene.opacity_logit = rng.normal(1.0, 0.8, n)
    scene.scale_log = np.log(rng.uniform(0.02, 0.08, (n, 3)))
    scene.quat = rng.normal(size=(n, 4))
    scene.quat /= np.linalg.norm(scene.quat, axis=1, keepdims=True)
    scene.bump()
    return scene


def bench(backend, scene, cam, repeats):
    tape = render.project_gaussians(scene, cam)
    attrs = render.gaussian_attributes(scene)
    args = (tape["order"], np.ascontiguousarray(tape["mean2d"]), tape["conics"],
            np.ascontiguousarray(tape["opacity"]), np.ascontiguousarray(tape["z_eucl"]),
            np.ascontiguousarray(tape["radii"]), np.ascontiguousarray(attrs),
            cam.width, cam.height)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = backend.composite_forward(*args)
    fwd = (time.perf_counter() - t0) / repeats
    rng = np.random.default_rng(0)
    dc = rng.normal(size=out[0].shape)
    da = rng.normal(size=out[1].shape)
    dz = rng.normal(size=out[1].shape)
    bargs = args + (out[0], out[1], out[2], dc, da, dz)
    t0 = time.perf_counter()
    for _ in range(repeats):
        backend.composite_backward(*bargs)
    bwd = (time.perf_counter() - t0) / repeats
    return fwd, bwd, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="32,64,128")
    ap.add_argument("--gaussians", default="200,700,2000")
    ap.add_argument("--repeats", type=int, default=10)
    args = ap.parse_args()

    fallback = get_backend("fallback")
    try:
        compiled = get_backend("compiled")
    except ImportError:
        compiled = None
        print("compiled backend not built; showing fallback only")

    print(f"{'size':>6} {'gaussians':>9} | {'fallback fwd':>12} {'fallback bwd':>12} |"
          f" {'compiled fwd':>12} {'compiled bwd':>12} | {'speedup':>8}")
    for size in (int(s) for s in args.sizes.split(",")):
        for n in (int(g) for g in args.gaussians.split(",")):
            scene = make_scene(n)
            cam = look_at_camera("b", eye=(0, 0, -2.5), target=(0, 0, 0), up=(0, 1, 0),
                                 width=size, height=size, focal=1.1 * size)
            f_fwd, f_bwd, f_out = bench(fallback, scene, cam, max(2, args.repeats // 4))
            if compiled is None:
                print(f"{size:>6} {n:>9} | {f_fwd * 1e3:>10.2f}ms {f_bwd * 1e3:>10.2f}ms |"
                      f" {'-':>12} {'-':>12} | {'-':>8}")
                continue
            c_fwd, c_bwd, c_out = bench(compiled, scene, cam, args.repeats)
            err = max(np.max(np.abs(f_out[0] - c_out[0])), np.max(np.abs(f_out[1] - c_out[1])))
            speed = (f_fwd + f_bwd) / (c_fwd + c_bwd)
            print(f"{size:>6} {n:>9} | {f_fwd * 1e3:>10.2f}ms {f_bwd * 1e3:>10.2f}ms |"
                  f" {c_fwd * 1e3:>10.2f}ms {c_bwd * 1e3:>10.2f}ms | {speed:>7.1f}x"
                  f"   (max|diff|={err:.1e})")


if __name__ == "__main__":
    main()
