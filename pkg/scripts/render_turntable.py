#!/usr/bin/env python3
"""Render a turntable of an OBJ mesh to PNG frames (debug/visual inspection)."""

import argparse
from pathlib import Path

import numpy as np

from dragd3d.mesh import bounding_info, load_obj
from dragd3d.render import Camera, render, save_png


def run(mesh_path: Path, outdir: Path, frames: int, elevation: float, size: int):
    mesh = load_obj(mesh_path)
    centroid, diagonal = bounding_info(mesh)
    outdir.mkdir(parents=True, exist_ok=True)
    for k in range(frames):
        azimuth = -180.0 + 360.0 * k / frames
        cam = Camera(azimuth, elevation, 1.25 * diagonal, tuple(centroid),
                     image_size=size)
        view = render(mesh.vertices, mesh.faces, mesh.colors, cam)
        save_png(view.rgb, outdir / f"frame_{k:03d}.png")
    print(f"wrote {frames} frames to {outdir}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("mesh", type=Path)
    ap.add_argument("--outdir", type=Path, default=Path("out/turntable"))
    ap.add_argument("--frames", type=int, default=12)
    ap.add_argument("--elevation", type=float, default=20.0)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args()
    run(args.mesh, args.outdir, args.frames, args.elevation, args.size)
