"""Command-line driver: parse inputs, wire modules, run the deformation.

Exit codes: 0 success, 2 validation error (message names the field),
3 guidance failure after retries, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dragd3d.guidance import (
    GuidanceConfig,
    GuidanceUnavailableError,
    mock_provider,
    service_provider,
)
from dragd3d.mesh import (
    DeformationMask,
    HandleConstraint,
    MeshParseError,
    MeshValidationError,
    TriMesh,
    load_obj,
    save_obj,
)
from dragd3d.optim import DeformationAborted, DeformationConfig, LossWeights, deform
from dragd3d.render import Camera, render, save_png

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GUIDANCE = 3
EXIT_DIVERGED = 4


class ConstraintFileError(ValueError):
    """Constraint file is malformed; the message names the offending field."""


@dataclass
class ConstraintFile:
    handles: list[HandleConstraint]
    mask: DeformationMask | None
    prompt: str
    camera_distance: float | None


def parse_constraint_file(path) -> ConstraintFile:
    """Strict parse: unknown keys are rejected, types are checked."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConstraintFileError(f"constraint file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConstraintFileError("constraint file must be a JSON object")
    allowed = {"handles", "mask", "prompt", "camera_distance"}
    for key in data:
        if key not in allowed:
            raise ConstraintFileError(f"unknown key {key!r} in constraint file")

    raw_handles = data.get("handles")
    if not isinstance(raw_handles, list) or not raw_handles:
        raise ConstraintFileError("handles must be a non-empty list")
    handles = []
    for k, entry in enumerate(raw_handles):
        if not isinstance(entry, dict) or set(entry) != {"vertex", "target"}:
            raise ConstraintFileError(
                f"handles[{k}] must be an object with exactly 'vertex' and 'target'")
        vertex = entry["vertex"]
        target = entry["target"]
        if not isinstance(vertex, int) or isinstance(vertex, bool):
            raise ConstraintFileError(f"handles[{k}].vertex must be an integer")
        if (not isinstance(target, list) or len(target) != 3
                or not all(isinstance(x, (int, float)) for x in target)):
            raise ConstraintFileError(f"handles[{k}].target must be [x, y, z]")
        handles.append(HandleConstraint(vertex_index=vertex, target=tuple(map(float, target))))

    mask = None
    raw_mask = data.get("mask")
    if raw_mask is not None:
        if not isinstance(raw_mask, dict) or "type" not in raw_mask:
            raise ConstraintFileError("mask must be an object with a 'type'")
        mtype = raw_mask["type"]
        if mtype == "all":
            if set(raw_mask) != {"type"}:
                raise ConstraintFileError("mask of type 'all' takes no other keys")
        elif mtype == "vertex_set":
            if set(raw_mask) != {"type", "vertices"}:
                raise ConstraintFileError("mask of type 'vertex_set' needs 'vertices'")
            verts = raw_mask["vertices"]
            if (not isinstance(verts, list)
                    or not all(isinstance(v, int) and not isinstance(v, bool) for v in verts)):
                raise ConstraintFileError("mask.vertices must be a list of integers")
            mask = DeformationMask.from_indices(verts)
        else:
            raise ConstraintFileError("mask.type must be 'all' or 'vertex_set'")

    prompt = data.get("prompt", "an object")
    if not isinstance(prompt, str):
        raise ConstraintFileError("prompt must be a string")

    d0 = data.get("camera_distance")
    if d0 is not None:
        if not isinstance(d0, (int, float)) or isinstance(d0, bool) or not d0 > 0:
            raise ConstraintFileError("camera_distance must be a positive number")
        d0 = float(d0)

    return ConstraintFile(handles=handles, mask=mask, prompt=prompt, camera_distance=d0)


def validate(mesh: TriMesh, constraints: ConstraintFile) -> list[str]:
    """Cross-check mesh and constraint file; returns findings (empty = valid)."""
    findings = []
    seen = set()
    for k, h in enumerate(constraints.handles):
        if not 0 <= h.vertex_index < mesh.num_vertices:
            findings.append(f"handles[{k}].vertex {h.vertex_index} out of range "
                            f"(mesh has {mesh.num_vertices} vertices)")
            continue
        if h.vertex_index in seen:
            findings.append(f"duplicate handle vertex {h.vertex_index} at handles[{k}]")
        seen.add(h.vertex_index)
        if not np.isfinite(h.target_array()).all():
            findings.append(f"handles[{k}].target is not finite")
    if constraints.mask is not None:
        vs = constraints.mask.vertex_set
        if vs.size and (vs.min() < 0 or vs.max() >= mesh.num_vertices):
            findings.append("mask.vertices contains an index outside the mesh")
        else:
            for k, h in enumerate(constraints.handles):
                if (0 <= h.vertex_index < mesh.num_vertices
                        and not constraints.mask.contains(h.vertex_index)):
                    findings.append(f"handle {k} not in mask")
    return findings


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dragd3d",
        description="Deform a mesh by dragging handle vertices, regularized by "
                    "ARAP rigidity and an image prior on rendered views.")
    p.add_argument("--mesh", required=True, help="input OBJ file")
    p.add_argument("--constraints", required=True,
                   help="JSON file with handles, mask, prompt, camera_distance")
    p.add_argument("--out", required=True, help="output OBJ path")
    p.add_argument("--iters", type=int, default=2000, help="iterations (default 2000)")
    p.add_argument("--arap-weight", type=float, default=0.04,
                   help="rigidity regularizer weight (default 0.04)")
    p.add_argument("--guidance", choices=["mock", "service"], default="mock",
                   help="guidance provider (default mock)")
    p.add_argument("--service-url", default=None,
                   help="diffusion service base URL (DRAGD3D_GUIDANCE_URL overrides)")
    p.add_argument("--mock-target", default=None,
                   help="PNG target for the mock provider (default: reference renders)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--views", type=int, default=4, help="views per iteration (default 4)")
    p.add_argument("--image-size", type=int, default=64,
                   help="render resolution in pixels (default 64)")
    p.add_argument("--snapshot-every", type=int, default=0,
                   help="dump OBJ+PNG every N iterations (default 0 = off)")
    p.add_argument("--report", default=None,
                   help="report JSON path (default: <out>.report.json)")
    p.add_argument("--sds", action="store_true",
                   help="ablation: plain score guidance without reference subtraction")
    p.add_argument("--fixed-views", action="store_true",
                   help="ablation: four canonical views instead of random cameras")
    return p


def _load_mock_target(path, image_size: int) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("RGB").resize((image_size, image_size), Image.BILINEAR)
    return (np.asarray(img, dtype=np.float64) / 255.0)[None]     # (1, H, W, 3), broadcast


def _write_report(report, path) -> None:
    Path(path).write_text(report.to_json())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    try:
        mesh = load_obj(args.mesh)
    except (MeshParseError, MeshValidationError, OSError) as exc:
        print(f"error: mesh: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        constraints = parse_constraint_file(args.constraints)
    except (ConstraintFileError, OSError) as exc:
        print(f"error: constraints: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    findings = validate(mesh, constraints)
    if findings:
        for f in findings:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_VALIDATION

    mode = "sds" if args.sds else "dds"
    if args.guidance == "service":
        gcfg = GuidanceConfig(provider="service", service_url=args.service_url, mode=mode)
        try:
            provider = service_provider(gcfg)
        except (GuidanceUnavailableError, ValueError) as exc:
            print(f"error: guidance: {exc}", file=sys.stderr)
            return EXIT_GUIDANCE
    else:
        target = None
        if args.mock_target:
            try:
                target = _load_mock_target(args.mock_target, args.image_size)
            except OSError as exc:
                print(f"error: mock-target: {exc}", file=sys.stderr)
                return EXIT_VALIDATION
        provider = mock_provider(target_images=target, mode=mode)

    config = DeformationConfig(
        handles=constraints.handles,
        mask=constraints.mask,
        prompt=constraints.prompt,
        iters=args.iters,
        views_per_iter=args.views,
        d0=constraints.camera_distance,
        weights=LossWeights(lambda_reg=args.arap_weight),
        seed=args.seed,
        snapshot_every=args.snapshot_every,
        image_size=args.image_size,
        fixed_views=args.fixed_views,
    )
    try:
        config.validate(mesh)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    out_path = Path(args.out)
    report_path = Path(args.report) if args.report else out_path.with_suffix(
        out_path.suffix + ".report.json")

    snapshot_cb = None
    if args.snapshot_every > 0:
        look_at = mesh.rest_vertices.mean(axis=0)
        diag = float(np.linalg.norm(mesh.rest_vertices.max(axis=0)
                                    - mesh.rest_vertices.min(axis=0)))
        snap_cam = Camera(30.0, 20.0, constraints.camera_distance or 1.25 * diag,
                          tuple(look_at), image_size=args.image_size)

        def snapshot_cb(iteration, verts):
            stem = out_path.with_suffix("")
            snap_mesh = TriMesh(vertices=verts, faces=mesh.faces, colors=mesh.colors,
                                rest_vertices=mesh.rest_vertices)
            save_obj(snap_mesh, f"{stem}_iter{iteration:05d}.obj")
            view = render(verts, mesh.faces, mesh.colors, snap_cam)
            save_png(view.rgb, f"{stem}_iter{iteration:05d}.png")

    try:
        mesh, report = deform(mesh, config, provider, snapshot_cb=snapshot_cb)
    except DeformationAborted as exc:
        _write_report(exc.report, report_path)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUIDANCE if exc.reason == "guidance" else EXIT_DIVERGED

    save_obj(mesh, out_path)
    _write_report(report, report_path)
    print(f"wrote {out_path} and {report_path} "
          f"({report.iterations_completed} iterations, {report.wall_time_s:.1f}s, "
          f"final user loss {report.user_loss[-1]:.6g})", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
