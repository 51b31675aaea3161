"""Deterministic differentiable rasterizer and random camera sampling.

Forward pass: perspective projection, nearest-face depth test, smooth-shaded
Lambertian lighting from a headlight at the camera, gray background, and a
one-pixel soft coverage band outside the silhouette so that outline gradients
exist.

The discrete decisions (which face covers a pixel, which silhouette edge owns
a band pixel, two-sided normal flips) are frozen by a numpy visibility pass.
Pixel values are then re-evaluated as a smooth torch function of the vertex
positions; the backward pass is the VJP of that same function, so forward and
backward are consistent by construction. Interior visibility stays hard: a
face fully behind another contributes nothing at covered pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

AMBIENT = 0.2
DIFFUSE = 0.8
BACKGROUND = (0.5, 0.5, 0.5)
DEFAULT_COLOR = (0.7, 0.7, 0.7)
BAND_CUTOFF = 1.25          # pixels kept in the band lists; alpha hits 0 at 1.0


@dataclass(frozen=True)
class Camera:
    """Orbit camera: angles in degrees, distance in model units, square image."""

    azimuth: float
    elevation: float
    distance: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_y: float = 45.0
    image_size: int = 64

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("camera distance must be positive")
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError("fov_y must be in (0, 180) degrees")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8 pixels")


def camera_frame(camera: Camera):
    """Eye position, world-to-camera rotation (rows right/up/back), focal factor."""
    az = math.radians(camera.azimuth)
    el = math.radians(camera.elevation)
    look = np.asarray(camera.look_at, dtype=np.float64)
    direction = np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    eye = look + camera.distance * direction
    forward = -direction
    up_hint = np.array([0.0, 1.0, 0.0])
    if abs(forward @ up_hint) > 0.999:          # looking straight down the up axis
        up_hint = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    rot = np.stack([right, up, -forward])
    focal = 1.0 / math.tan(math.radians(camera.fov_y) / 2.0)
    return eye, rot, focal


def sample_cameras(rng, d0: float, look_at, count: int, fov_y: float = 45.0,
                   image_size: int = 64) -> list[Camera]:
    """Uniformly random orbit cameras: azimuth in [-180, 180] degrees, elevation
    in [0, 90] degrees, distance in [d0, d0 + 2].

    Consumes exactly three uniform draws per camera (azimuth, elevation,
    distance, in that order), so camera sampling is reproducible from the seed.
    """
    if not d0 > 0:
        raise ValueError("d0 must be positive")
    look = tuple(float(v) for v in look_at)
    cams = []
    for _ in range(count):
        az = float(rng.uniform(-180.0, 180.0))
        el = float(rng.uniform(0.0, 90.0))
        dist = float(rng.uniform(d0, d0 + 2.0))
        cams.append(Camera(az, el, dist, look, fov_y, image_size))
    return cams


@dataclass
class RenderAux:
    """Frozen per-view decisions consumed by the differentiable re-evaluation."""

    faces: np.ndarray
    colors: np.ndarray
    eye: np.ndarray
    rot: np.ndarray
    focal: float
    size: int
    light: np.ndarray
    # covered pixels: image coordinates and covering face
    cov_iy: np.ndarray
    cov_ix: np.ndarray
    cov_face: np.ndarray
    # silhouette-band pixels: image coordinates, owning edge endpoints, owner face
    band_iy: np.ndarray
    band_ix: np.ndarray
    band_v0: np.ndarray
    band_v1: np.ndarray
    band_face: np.ndarray
    face_sign: np.ndarray          # +-1 two-sided shading flip, per face
    background: np.ndarray = field(default_factory=lambda: np.asarray(BACKGROUND))


@dataclass
class RenderedView:
    """Shaded image plus the visibility buffers needed for backpropagation."""

    rgb: np.ndarray                # (H, W, 3) in [0, 1]
    face_ids: np.ndarray           # (H, W) int32; -1 = background
    bary: np.ndarray               # (H, W, 3) screen-space barycentrics
    alpha: np.ndarray              # (H, W) coverage in [0, 1]
    camera: Camera
    aux: RenderAux


def _project(verts, eye, rot, focal, size):
    cam = (verts - eye) @ rot.T
    depth = -cam[:, 2]
    safe = np.where(depth > 1e-12, depth, 1e-12)
    px = (focal * cam[:, 0] / safe + 1.0) * 0.5 * size
    py = (1.0 - focal * cam[:, 1] / safe) * 0.5 * size
    return np.stack([px, py], axis=1), depth


def _rasterize(faces, screen, depth, valid, size):
    """Nearest-face coverage. Returns (face_id, bary) images; ties resolved by
    the lowest face index so the pass is order-independent and deterministic."""
    fid = np.full((size, size), -1, dtype=np.int32)
    bary = np.zeros((size, size, 3))
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return fid, bary
    tri = screen[faces[idx]]                    # (F', 3, 2)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    x0 = np.clip(np.floor(lo[:, 0] - 0.5).astype(np.int64), 0, size - 1)
    y0 = np.clip(np.floor(lo[:, 1] - 0.5).astype(np.int64), 0, size - 1)
    x1 = np.clip(np.ceil(hi[:, 0] - 0.5).astype(np.int64), 0, size - 1)
    y1 = np.clip(np.ceil(hi[:, 1] - 0.5).astype(np.int64), 0, size - 1)
    keep = (hi[:, 0] >= 0) & (hi[:, 1] >= 0) & (lo[:, 0] <= size) & (lo[:, 1] <= size)
    idx, tri = idx[keep], tri[keep]
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]
    if idx.size == 0:
        return fid, bary

    bw = int((x1 - x0).max()) + 1
    bh = int((y1 - y0).max()) + 1
    gx = x0[:, None, None] + np.arange(bw)[None, None, :]
    gy = y0[:, None, None] + np.arange(bh)[None, :, None]
    in_box = (gx <= x1[:, None, None]) & (gy <= y1[:, None, None]) \
        & (gx < size) & (gy < size)
    qx = gx + 0.5
    qy = gy + 0.5

    ax, ay = tri[:, 0, 0, None, None], tri[:, 0, 1, None, None]
    bx, by = tri[:, 1, 0, None, None], tri[:, 1, 1, None, None]
    cx, cy = tri[:, 2, 0, None, None], tri[:, 2, 1, None, None]
    det = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    wb = ((qx - ax) * (cy - ay) - (qy - ay) * (cx - ax)) / det
    wc = ((bx - ax) * (qy - ay) - (by - ay) * (qx - ax)) / det
    wa = 1.0 - wb - wc
    inside = in_box & (wa >= 0.0) & (wb >= 0.0) & (wc >= 0.0)
    if not inside.any():
        return fid, bary

    d = depth[faces[idx]]
    d_px = wa * d[:, 0, None, None] + wb * d[:, 1, None, None] + wc * d[:, 2, None, None]

    sel = np.nonzero(inside)
    gx_full = np.broadcast_to(gx, inside.shape)
    gy_full = np.broadcast_to(gy, inside.shape)
    pix = gy_full[sel] * size + gx_full[sel]
    cand_face = idx[sel[0]]
    cand_depth = d_px[sel]
    order = np.lexsort((cand_face, cand_depth, pix))
    first = np.unique(pix[order], return_index=True)[1]
    win = order[first]

    fy, fx = pix[win] // size, pix[win] % size
    fid[fy, fx] = cand_face[win].astype(np.int32)
    bary[fy, fx, 0] = wa[sel][win]
    bary[fy, fx, 1] = wb[sel][win]
    bary[fy, fx, 2] = wc[sel][win]
    return fid, bary


def _visibility(verts, faces, colors, camera):
    eye, rot, focal = camera_frame(camera)
    size = camera.image_size
    light = eye - np.asarray(camera.look_at, dtype=np.float64)
    light /= np.linalg.norm(light)

    screen, depth = _project(verts, eye, rot, focal, size)
    nf = faces.shape[0]
    near = 1e-6 + 1e-4 * camera.distance

    det_f = np.zeros(nf)
    valid = np.zeros(nf, dtype=bool)
    face_sign = np.ones(nf)
    if nf:
        tri_w = verts[faces]
        normals = np.cross(tri_w[:, 1] - tri_w[:, 0], tri_w[:, 2] - tri_w[:, 0])
        toward_eye = np.einsum("fa,fa->f", normals, eye - tri_w.mean(axis=1))
        face_sign = np.where(toward_eye >= 0.0, 1.0, -1.0)
        tri_s = screen[faces]
        det_f = ((tri_s[:, 1, 0] - tri_s[:, 0, 0]) * (tri_s[:, 2, 1] - tri_s[:, 0, 1])
                 - (tri_s[:, 1, 1] - tri_s[:, 0, 1]) * (tri_s[:, 2, 0] - tri_s[:, 0, 0]))
        valid = (depth[faces] > near).all(axis=1) & (np.abs(det_f) > 1e-12)

    fid, bary = _rasterize(faces, screen, depth, valid, size)
    band_v0, band_v1, band_face, band_iy, band_ix = _silhouette_band(
        faces, screen, det_f, valid, fid, size)

    cov_iy, cov_ix = np.nonzero(fid >= 0)
    aux = RenderAux(
        faces=faces, colors=colors, eye=eye, rot=rot, focal=focal, size=size,
        light=light,
        cov_iy=cov_iy, cov_ix=cov_ix, cov_face=fid[cov_iy, cov_ix].astype(np.int64),
        band_iy=band_iy, band_ix=band_ix, band_v0=band_v0, band_v1=band_v1,
        band_face=band_face, face_sign=face_sign,
    )
    return aux, fid, bary


def _silhouette_band(faces, screen, det_f, valid, fid, size):
    """Pick silhouette edges and assign each uncovered nearby pixel to its
    nearest one. Silhouette = boundary edge of a valid face, or an edge whose
    two valid faces have opposite projected orientation. The owner face (used
    for shading the band) is the camera-facing one."""
    empty = np.zeros(0, dtype=np.int64)
    nothing = (empty, empty, empty, empty.copy(), empty.copy())
    if faces.size == 0 or not valid.any():
        return nothing

    fidx = np.repeat(np.arange(faces.shape[0]), 3)
    edges = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    keep = valid[fidx]
    edges, fidx = edges[keep], fidx[keep]
    uniq, inverse, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    order = np.argsort(inverse, kind="stable")
    sorted_face = fidx[order]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    front = det_f < 0.0      # CCW world face toward the camera flips under y-down screen
    sil_edges = []
    sil_owner = []
    for k in np.nonzero(counts == 1)[0]:
        sil_edges.append(uniq[k])
        sil_owner.append(sorted_face[starts[k]])
    for k in np.nonzero(counts == 2)[0]:
        f1, f2 = sorted_face[starts[k]], sorted_face[starts[k] + 1]
        if front[f1] != front[f2]:
            sil_edges.append(uniq[k])
            sil_owner.append(f1 if front[f1] else f2)
    if not sil_edges:
        return nothing

    dmin = np.full((size, size), np.inf)
    own_edge = np.full((size, size), -1, dtype=np.int64)
    uncovered = fid < 0
    centers = np.arange(size) + 0.5
    for e_id, (v0, v1) in enumerate(sil_edges):
        p0, p1 = screen[v0], screen[v1]
        xlo = max(0, int(math.floor(min(p0[0], p1[0]) - BAND_CUTOFF - 0.5)))
        xhi = min(size - 1, int(math.ceil(max(p0[0], p1[0]) + BAND_CUTOFF - 0.5)))
        ylo = max(0, int(math.floor(min(p0[1], p1[1]) - BAND_CUTOFF - 0.5)))
        yhi = min(size - 1, int(math.ceil(max(p0[1], p1[1]) + BAND_CUTOFF - 0.5)))
        if xlo > xhi or ylo > yhi:
            continue
        qx = centers[xlo:xhi + 1][None, :]
        qy = centers[ylo:yhi + 1][:, None]
        ex, ey = p1[0] - p0[0], p1[1] - p0[1]
        ee = ex * ex + ey * ey
        if ee < 1e-18:
            continue
        t = np.clip(((qx - p0[0]) * ex + (qy - p0[1]) * ey) / ee, 0.0, 1.0)
        dx = qx - (p0[0] + t * ex)
        dy = qy - (p0[1] + t * ey)
        d = np.hypot(dx, dy)
        sub = (slice(ylo, yhi + 1), slice(xlo, xhi + 1))
        better = uncovered[sub] & (d < BAND_CUTOFF) & (d < dmin[sub])
        if not better.any():
            continue
        dmin[sub][better] = d[better]
        own_edge[sub][better] = e_id

    band_iy, band_ix = np.nonzero(own_edge >= 0)
    eids = own_edge[band_iy, band_ix]
    sil_edges = np.asarray(sil_edges, dtype=np.int64)
    sil_owner = np.asarray(sil_owner, dtype=np.int64)
    return (sil_edges[eids, 0], sil_edges[eids, 1], sil_owner[eids], band_iy, band_ix)


def _evaluate(verts_t: torch.Tensor, aux: RenderAux):
    """Differentiable image from vertices under the frozen visibility in aux.

    Returns (image (H, W, 3), alpha (H, W)) as torch tensors.
    """
    size = aux.size
    dd = verts_t.dtype
    eye = torch.as_tensor(aux.eye, dtype=dd)
    rot = torch.as_tensor(aux.rot, dtype=dd)
    light = torch.as_tensor(aux.light, dtype=dd)
    colors = torch.as_tensor(aux.colors, dtype=dd)
    bg = torch.as_tensor(aux.background, dtype=dd)
    faces_t = torch.as_tensor(aux.faces, dtype=torch.long)

    cam = (verts_t - eye) @ rot.T
    depth = torch.clamp(-cam[:, 2], min=1e-12)
    px = (aux.focal * cam[:, 0] / depth + 1.0) * 0.5 * size
    py = (1.0 - aux.focal * cam[:, 1] / depth) * 0.5 * size
    screen = torch.stack([px, py], dim=1)

    img = bg.expand(size, size, 3).clone()
    alpha = torch.zeros((size, size), dtype=dd)
    if verts_t.shape[0] == 0 or aux.faces.size == 0:
        return img, alpha

    # smooth shading: area-weighted vertex normals from world-space faces
    a_w = verts_t[faces_t[:, 0]]
    b_w = verts_t[faces_t[:, 1]]
    c_w = verts_t[faces_t[:, 2]]
    face_n = torch.linalg.cross(b_w - a_w, c_w - a_w)
    vert_n = torch.zeros_like(verts_t)
    for k in range(3):
        vert_n = vert_n.index_add(0, faces_t[:, k], face_n)
    vert_n = vert_n / torch.clamp(torch.linalg.norm(vert_n, dim=1, keepdim=True), min=1e-30)

    def shade_from(normals: torch.Tensor, face_idx: torch.Tensor) -> torch.Tensor:
        n = normals / torch.clamp(torch.linalg.norm(normals, dim=1, keepdim=True), min=1e-30)
        sign = torch.as_tensor(aux.face_sign, dtype=dd)[face_idx]
        return AMBIENT + DIFFUSE * torch.clamp(sign * (n @ light), min=0.0)

    if aux.cov_face.size:
        face_idx = torch.as_tensor(aux.cov_face, dtype=torch.long)
        tri = faces_t[face_idx]
        A, B, C = screen[tri[:, 0]], screen[tri[:, 1]], screen[tri[:, 2]]
        qx = torch.as_tensor(aux.cov_ix, dtype=dd) + 0.5
        qy = torch.as_tensor(aux.cov_iy, dtype=dd) + 0.5
        det = (B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) \
            - (B[:, 1] - A[:, 1]) * (C[:, 0] - A[:, 0])
        wb = ((qx - A[:, 0]) * (C[:, 1] - A[:, 1])
              - (qy - A[:, 1]) * (C[:, 0] - A[:, 0])) / det
        wc = ((B[:, 0] - A[:, 0]) * (qy - A[:, 1])
              - (B[:, 1] - A[:, 1]) * (qx - A[:, 0])) / det
        wa = 1.0 - wb - wc
        albedo = (wa[:, None] * colors[tri[:, 0]]
                  + wb[:, None] * colors[tri[:, 1]]
                  + wc[:, None] * colors[tri[:, 2]])
        n_px = (wa[:, None] * vert_n[tri[:, 0]]
                + wb[:, None] * vert_n[tri[:, 1]]
                + wc[:, None] * vert_n[tri[:, 2]])
        shade = shade_from(n_px, face_idx)
        iy = torch.as_tensor(aux.cov_iy, dtype=torch.long)
        ix = torch.as_tensor(aux.cov_ix, dtype=torch.long)
        img = img.index_put((iy, ix), albedo * shade[:, None])
        alpha = alpha.index_put((iy, ix), torch.ones(len(iy), dtype=dd))

    if aux.band_face.size:
        v0 = torch.as_tensor(aux.band_v0, dtype=torch.long)
        v1 = torch.as_tensor(aux.band_v1, dtype=torch.long)
        e0, e1 = screen[v0], screen[v1]
        qx = torch.as_tensor(aux.band_ix, dtype=dd) + 0.5
        qy = torch.as_tensor(aux.band_iy, dtype=dd) + 0.5
        q = torch.stack([qx, qy], dim=1)
        e = e1 - e0
        ee = torch.clamp((e * e).sum(dim=1), min=1e-18)
        t = torch.clamp(((q - e0) * e).sum(dim=1) / ee, 0.0, 1.0)
        m = e0 + t[:, None] * e
        d = torch.sqrt(((q - m) ** 2).sum(dim=1) + 1e-12)
        a_band = torch.clamp(1.0 - d, 0.0, 1.0)
        n_e = (1.0 - t[:, None]) * vert_n[v0] + t[:, None] * vert_n[v1]
        shade = shade_from(n_e, torch.as_tensor(aux.band_face, dtype=torch.long))
        albedo = (1.0 - t[:, None]) * colors[v0] + t[:, None] * colors[v1]
        out = a_band[:, None] * (albedo * shade[:, None]) + (1.0 - a_band[:, None]) * bg
        iy = torch.as_tensor(aux.band_iy, dtype=torch.long)
        ix = torch.as_tensor(aux.band_ix, dtype=torch.long)
        img = img.index_put((iy, ix), out)
        alpha = alpha.index_put((iy, ix), a_band)

    return img, alpha


def render(vertices: np.ndarray, faces: np.ndarray, colors: np.ndarray | None,
           camera: Camera) -> RenderedView:
    """Pure function of (vertices, colors, camera): bit-identical across calls."""
    verts = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    if colors is None:
        cols = np.full((verts.shape[0], 3), DEFAULT_COLOR[0], dtype=np.float64)
    else:
        cols = np.ascontiguousarray(colors, dtype=np.float64)
    aux, fid, bary = _visibility(verts, faces, cols, camera)
    with torch.no_grad():
        img, alpha = _evaluate(torch.tensor(verts), aux)
    return RenderedView(
        rgb=img.numpy(), face_ids=fid, bary=bary, alpha=alpha.numpy(),
        camera=camera, aux=aux,
    )


def render_backward(view: RenderedView, grad_rgb: np.ndarray,
                    vertices: np.ndarray) -> np.ndarray:
    """Per-vertex gradients of sum(grad_rgb * image) under the view's frozen
    visibility; ``vertices`` must be the array the view was rendered from."""
    verts_t = torch.tensor(np.asarray(vertices, dtype=np.float64), requires_grad=True)
    img, _ = _evaluate(verts_t, view.aux)
    loss = (img * torch.as_tensor(grad_rgb, dtype=img.dtype)).sum()
    grad, = torch.autograd.grad(loss, verts_t, allow_unused=True)
    if grad is None:
        return np.zeros_like(np.asarray(vertices, dtype=np.float64))
    return grad.numpy()


def save_png(rgb: np.ndarray, path) -> None:
    """8-bit PNG snapshot of a rendered image."""
    from PIL import Image

    data = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)
