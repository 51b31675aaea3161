"""Outer optimization loop over the per-face Jacobian field.

Each iteration: recover vertices by the Poisson solve, assemble per-vertex
gradients from the user-constraint loss (linearly scheduled weight), the ARAP
regularizer (frozen freshly fitted rotations), and the guidance prior on
rendered views (averaged over views); pull the sum back through the Poisson
adjoint, zero it outside the mask, and take one Adan step. The per-face field
is the only optimization variable - vertices are never updated directly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from dragd3d.arap import arap_energy, arap_gradient, fit_rotations, init_arap_state
from dragd3d.guidance import GuidanceError, GuidanceRequest, dds_gradients
from dragd3d.mesh import DeformationMask, HandleConstraint, TriMesh
from dragd3d.operators import build_operators, extract_jacobians, poisson_adjoint, poisson_solve
from dragd3d.render import Camera, render, render_backward, sample_cameras


@dataclass(frozen=True)
class LossWeights:
    """lambda_user is dynamic (see Schedule); the stored value is its start."""

    lambda_user: float = 1.0
    lambda_dds: float = 1.0
    lambda_reg: float = 0.04

    def __post_init__(self):
        if min(self.lambda_user, self.lambda_dds, self.lambda_reg) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class Schedule:
    """Linear ramp of the user-constraint weight across the run."""

    start: float = 1.0
    end: float = 50.0
    total_iters: int = 2000

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("schedule start must not exceed end")
        if self.total_iters < 1:
            raise ValueError("total_iters must be at least 1")


def schedule_weight(schedule: Schedule, iteration: int) -> float:
    """start + (end - start) * iteration / (total - 1), clamped at end."""
    span = max(schedule.total_iters - 1, 1)
    frac = min(iteration / span, 1.0)
    return schedule.start + (schedule.end - schedule.start) * frac


@dataclass
class AdanState:
    """Moment buffers for the Adan update; shapes mirror the variable."""

    first_moment: np.ndarray
    grad_diff_moment: np.ndarray
    second_moment: np.ndarray
    previous_gradient: np.ndarray | None
    step_count: int = 0
    betas: tuple[float, float, float] = (0.98, 0.92, 0.99)
    learning_rate: float = 0.005
    weight_decay: float = 0.0
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, variable: np.ndarray, learning_rate: float = 0.005,
                   betas=(0.98, 0.92, 0.99), weight_decay: float = 0.0) -> "AdanState":
        z = np.zeros_like(np.asarray(variable, dtype=np.float64))
        return cls(first_moment=z.copy(), grad_diff_moment=z.copy(),
                   second_moment=z.copy(), previous_gradient=None,
                   betas=tuple(betas), learning_rate=learning_rate,
                   weight_decay=weight_decay)


def adan_step(state: AdanState, gradient: np.ndarray, variable: np.ndarray):
    """One Adan update; returns (new_state, new_variable).

    Moving averages of the gradient, the gradient difference, and the squared
    Nesterov-combined gradient, each bias-corrected; the step is the corrected
    first moment plus beta2 times the corrected difference moment, divided by
    the root of the corrected second moment.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.first_moment.shape:
        raise ValueError("gradient shape does not match the optimizer state")
    b1, b2, b3 = state.betas
    t = state.step_count + 1
    prev = g if state.previous_gradient is None else state.previous_gradient
    diff = g - prev
    m = b1 * state.first_moment + (1.0 - b1) * g
    v = b2 * state.grad_diff_moment + (1.0 - b2) * diff
    u = g + b2 * diff
    n = b3 * state.second_moment + (1.0 - b3) * u * u
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    bc3 = 1.0 - b3 ** t
    denom = np.sqrt(n / bc3) + state.eps
    step = state.learning_rate * (m / bc1 + b2 * v / bc2) / denom
    new_var = np.asarray(variable, dtype=np.float64) - step
    if state.weight_decay:
        new_var = new_var / (1.0 + state.learning_rate * state.weight_decay)
    new_state = replace(state, first_moment=m, grad_diff_moment=v, second_moment=n,
                        previous_gradient=g.copy(), step_count=t)
    return new_state, new_var


def user_loss(vertices: np.ndarray, handles: list[HandleConstraint]):
    """Sum of squared handle-to-target distances and its per-vertex gradient."""
    verts = np.asarray(vertices, dtype=np.float64)
    grad = np.zeros_like(verts)
    total = 0.0
    for h in handles:
        delta = verts[h.vertex_index] - h.target_array()
        total += float(delta @ delta)
        grad[h.vertex_index] += 2.0 * delta
    return total, grad


def apply_mask(field_gradient: np.ndarray, mask: DeformationMask | None,
               faces: np.ndarray) -> np.ndarray:
    """Zero gradients on faces with no movable vertex; None means all movable."""
    if mask is None:
        return field_gradient
    out = np.asarray(field_gradient, dtype=np.float64).copy()
    out[~mask.face_flags(faces)] = 0.0
    return out


@dataclass
class DeformationConfig:
    handles: list[HandleConstraint]
    prompt: str = "an object"
    mask: DeformationMask | None = None
    iters: int = 2000
    views_per_iter: int = 4
    d0: float | None = None            # defaults to 1.25 x bounding diagonal
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule | None = None   # defaults to Schedule(1, 50, iters)
    seed: int = 0
    snapshot_every: int = 0
    image_size: int = 64
    fov_y: float = 45.0
    fixed_views: bool = False          # ablation: four canonical views, constant

    def validate(self, mesh: TriMesh):
        if not self.handles:
            raise ValueError("at least one handle constraint is required")
        for k, h in enumerate(self.handles):
            if not 0 <= h.vertex_index < mesh.num_vertices:
                raise ValueError(f"handles[{k}].vertex out of range")
            if not np.isfinite(h.target_array()).all():
                raise ValueError(f"handles[{k}].target is not finite")
            if self.mask is not None and not self.mask.contains(h.vertex_index):
                raise ValueError(f"handle {k} not in mask")
        if self.mask is not None:
            self.mask.validate(mesh.num_vertices)
        if self.iters < 1 or self.views_per_iter < 1:
            raise ValueError("iters and views_per_iter must be positive")

    def resolved_schedule(self) -> Schedule:
        if self.schedule is not None:
            return self.schedule
        return Schedule(start=1.0, end=50.0, total_iters=self.iters)


@dataclass
class RunReport:
    """Loss curves and bookkeeping; serializes deterministically to JSON."""

    seed: int
    config: dict
    status: str = "running"            # completed | diverged | guidance_failed
    iterations_completed: int = 0
    total_loss: list = field(default_factory=list)
    user_loss: list = field(default_factory=list)
    arap_loss: list = field(default_factory=list)
    dds_scalar: list = field(default_factory=list)
    lambda_user: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    abort_reason: str | None = None
    wall_time_s: float = 0.0           # logged, never serialized: reports stay byte-stable
    final_field: np.ndarray | None = None   # optimized per-face field; never serialized

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "status": self.status,
            "iterations_completed": self.iterations_completed,
            "curves": {
                "total_loss": self.total_loss,
                "user_loss": self.user_loss,
                "arap_loss": self.arap_loss,
                "dds_scalar": self.dds_scalar,
                "lambda_user": self.lambda_user,
                "grad_norm": self.grad_norm,
            },
            "abort_reason": self.abort_reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


class DeformationAborted(RuntimeError):
    """Raised when a run stops early; carries the partial report."""

    def __init__(self, reason: str, iteration: int, report: RunReport, message: str):
        super().__init__(message)
        self.reason = reason
        self.iteration = iteration
        self.report = report


def _config_echo(config: DeformationConfig, d0: float) -> dict:
    return {
        "prompt": config.prompt,
        "iters": config.iters,
        "views_per_iter": config.views_per_iter,
        "d0": d0,
        "seed": config.seed,
        "image_size": config.image_size,
        "fov_y": config.fov_y,
        "fixed_views": config.fixed_views,
        "snapshot_every": config.snapshot_every,
        "lambda_reg": config.weights.lambda_reg,
        "lambda_dds": config.weights.lambda_dds,
        "schedule": {
            "start": config.resolved_schedule().start,
            "end": config.resolved_schedule().end,
            "total_iters": config.resolved_schedule().total_iters,
        },
        "handles": [
            {"vertex": h.vertex_index, "target": [float(x) for x in h.target]}
            for h in config.handles
        ],
        "mask": (None if config.mask is None
                 else [int(v) for v in config.mask.vertex_set]),
    }


def canonical_views(d0: float, look_at, fov_y: float, image_size: int) -> list[Camera]:
    """Front, sides, and back at zero elevation (fixed-view ablation)."""
    look = tuple(float(v) for v in look_at)
    return [Camera(az, 0.0, d0 + 1.0, look, fov_y, image_size)
            for az in (0.0, 90.0, 180.0, -90.0)]


def deform(mesh: TriMesh, config: DeformationConfig, provider=None, snapshot_cb=None):
    """Run the deformation; returns (mesh, RunReport). The mesh's ``vertices``
    are updated in place with the final Poisson-solved positions.

    ``provider`` None disables the rendered-view guidance term entirely.
    ``snapshot_cb(iteration, vertices)`` fires every ``snapshot_every`` iters.
    """
    config.validate(mesh)
    ops = build_operators(mesh)
    arap_state = init_arap_state(mesh)
    schedule = config.resolved_schedule()
    rest = np.asarray(mesh.rest_vertices, dtype=np.float64)
    look_at = rest.mean(axis=0)
    diag = float(np.linalg.norm(rest.max(axis=0) - rest.min(axis=0)))
    d0 = config.d0 if config.d0 is not None else 1.25 * diag

    field_var = extract_jacobians(ops, rest)
    adan = AdanState.zeros_like(field_var)
    rng = np.random.default_rng(config.seed)
    report = RunReport(seed=config.seed, config=_config_echo(config, d0))

    colors = mesh.colors
    fixed_cams = None
    if config.fixed_views:
        fixed_cams = canonical_views(d0, look_at, config.fov_y, config.image_size)

    start_time = time.monotonic()
    for iteration in range(config.iters):
        verts = poisson_solve(ops, field_var)
        lam_user = schedule_weight(schedule, iteration)
        l_user, g_user = user_loss(verts, config.handles)
        arap_state = fit_rotations(mesh, verts, arap_state)
        l_reg = arap_energy(mesh, verts, arap_state)
        g_reg = arap_gradient(mesh, verts, arap_state)
        g_total = lam_user * g_user + config.weights.lambda_reg * g_reg

        dds_scalar = None
        if provider is not None:
            if fixed_cams is not None:
                cams = fixed_cams
            else:
                cams = sample_cameras(rng, d0, look_at, config.views_per_iter,
                                      config.fov_y, config.image_size)
            edit_views = [render(verts, mesh.faces, colors, cam) for cam in cams]
            ref_views = [render(rest, mesh.faces, colors, cam) for cam in cams]
            request = GuidanceRequest(
                edit_images=np.stack([v.rgb for v in edit_views]),
                ref_images=np.stack([v.rgb for v in ref_views]),
                prompt=config.prompt,
                camera_azimuths=np.asarray([c.azimuth for c in cams]),
                seed=config.seed,
            )
            try:
                response = dds_gradients(request, provider)
            except GuidanceError as exc:
                report.status = "guidance_failed"
                report.abort_reason = str(exc)
                report.iterations_completed = iteration
                raise DeformationAborted(
                    "guidance", iteration, report,
                    f"guidance failed at iteration {iteration}: {exc}") from exc
            g_dds = np.zeros_like(g_total)
            for k, view in enumerate(edit_views):
                g_dds += render_backward(view, response.pixel_gradients[k], verts)
            g_total += config.weights.lambda_dds * (g_dds / len(cams))
            dds_scalar = response.diagnostics.get("scalar")
            if dds_scalar is not None:
                dds_scalar *= config.weights.lambda_dds

        total = lam_user * l_user + config.weights.lambda_reg * l_reg + (dds_scalar or 0.0)
        if not (np.isfinite(total) and np.isfinite(g_total).all()):
            report.status = "diverged"
            report.abort_reason = f"non-finite loss or gradient at iteration {iteration}"
            report.iterations_completed = iteration
            raise DeformationAborted(
                "diverged", iteration, report,
                f"diverged at iteration {iteration}")

        field_grad = poisson_adjoint(ops, g_total)
        field_grad = apply_mask(field_grad, config.mask, mesh.faces)

        report.total_loss.append(float(total))
        report.user_loss.append(float(l_user))
        report.arap_loss.append(float(l_reg))
        report.dds_scalar.append(None if dds_scalar is None else float(dds_scalar))
        report.lambda_user.append(float(lam_user))
        report.grad_norm.append(float(np.linalg.norm(field_grad)))

        adan, field_var = adan_step(adan, field_grad, field_var)

        if snapshot_cb is not None and config.snapshot_every > 0 \
                and (iteration + 1) % config.snapshot_every == 0:
            snapshot_cb(iteration + 1, poisson_solve(ops, field_var))

    mesh.vertices[:] = poisson_solve(ops, field_var)
    report.status = "completed"
    report.iterations_completed = config.iters
    report.wall_time_s = time.monotonic() - start_time
    report.final_field = field_var
    return mesh, report
