import numpy as np
import pytest

from dragd3d.primitives import icosphere
from dragd3d.render import (
    BACKGROUND,
    Camera,
    render,
    render_backward,
    sample_cameras,
    save_png,
)

BG = np.asarray(BACKGROUND)


def quad_scene():
    verts = np.array([(-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0)], float)
    faces = np.array([(0, 1, 2), (0, 2, 3)])
    colors = np.array([(0.9, 0.2, 0.1), (0.1, 0.8, 0.3), (0.2, 0.3, 0.9), (0.8, 0.8, 0.1)])
    return verts, faces, colors


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 0, -1.0)
    with pytest.raises(ValueError):
        Camera(0, 0, 1.0, fov_y=200.0)
    with pytest.raises(ValueError):
        Camera(0, 0, 1.0, image_size=4)


def test_sample_cameras_ranges_and_coverage():
    rng = np.random.default_rng(123)
    cams = sample_cameras(rng, d0=2.0, look_at=(0, 0, 0), count=10_000)
    az = np.array([c.azimuth for c in cams])
    el = np.array([c.elevation for c in cams])
    dist = np.array([c.distance for c in cams])
    assert az.min() >= -180 and az.max() <= 180
    assert el.min() >= 0 and el.max() <= 90
    assert dist.min() >= 2.0 and dist.max() <= 4.0
    # coverage within 1% of the endpoints
    assert az.min() <= -180 + 3.6 and az.max() >= 180 - 3.6
    assert el.min() <= 0.9 and el.max() >= 90 - 0.9
    assert dist.min() <= 2.02 and dist.max() >= 4.0 - 0.02


def test_sample_cameras_deterministic():
    a = sample_cameras(np.random.default_rng(5), 1.0, (0, 0, 0), 4)
    b = sample_cameras(np.random.default_rng(5), 1.0, (0, 0, 0), 4)
    assert a == b and len(a) == 4


def test_full_frame_triangle_center_pixel():
    """Head-on light, unit diffuse albedo (1,0,0): shade = 0.2 + 0.8 * 1."""
    verts = np.array([(-10, -10, 0), (10, -10, 0), (0, 15, 0)], float)
    faces = np.array([(0, 1, 2)])
    colors = np.array([(1.0, 0, 0)] * 3)
    view = render(verts, faces, colors, Camera(0.0, 0.0, 2.0, (0, 0, 0), 60.0, 64))
    assert np.allclose(view.rgb[32, 32], [1.0, 0.0, 0.0], atol=1e-12)
    assert view.face_ids[32, 32] == 0
    assert view.rgb.min() >= 0.0 and view.rgb.max() <= 1.0


def test_empty_mesh_renders_background():
    view = render(np.zeros((0, 3)), np.zeros((0, 3), np.int64), None,
                  Camera(0, 0, 2.0))
    assert np.allclose(view.rgb, BG)
    assert (view.face_ids == -1).all()


def test_opposite_azimuth_symmetry():
    v, f = icosphere(2)
    img0 = render(v, f, None, Camera(0.0, 0.0, 3.0, (0, 0, 0), 45.0, 64)).rgb
    img180 = render(v, f, None, Camera(180.0, 0.0, 3.0, (0, 0, 0), 45.0, 64)).rgb
    assert np.abs(img0 - img180).max() < 1e-6


def test_render_pure_function():
    v, f = icosphere(1)
    cam = Camera(33.0, 21.0, 2.5, (0, 0, 0), 45.0, 48)
    a = render(v, f, None, cam)
    b = render(v, f, None, cam)
    assert (a.rgb == b.rgb).all() and (a.face_ids == b.face_ids).all()


def test_backward_zero_grad_rgb():
    v, f = icosphere(1)
    view = render(v, f, None, Camera(0, 10, 3.0))
    g = render_backward(view, np.zeros_like(view.rgb), v)
    assert (g == 0).all()


def test_backward_linear_in_grad_rgb():
    v, f = icosphere(1)
    view = render(v, f, None, Camera(40, 15, 3.0))
    rng = np.random.default_rng(2)
    g1 = rng.normal(size=view.rgb.shape)
    g2 = rng.normal(size=view.rgb.shape)
    lhs = render_backward(view, 2.0 * g1 + 0.5 * g2, v)
    rhs = 2.0 * render_backward(view, g1, v) + 0.5 * render_backward(view, g2, v)
    assert np.abs(lhs - rhs).max() < 1e-9 * max(np.abs(lhs).max(), 1.0)


def test_backward_matches_finite_differences_interior():
    verts, faces, colors = quad_scene()
    cam = Camera(25.0, 30.0, 3.0, (0, 0, 0), 45.0, 64)
    view = render(verts, faces, colors, cam)
    interior = np.argwhere((view.face_ids >= 0) & (view.bary.min(axis=2) > 0.15))
    rng = np.random.default_rng(0)
    picks = interior[rng.choice(len(interior), 6, replace=False)]
    grad_rgb = np.zeros_like(view.rgb)
    for iy, ix in picks:
        grad_rgb[iy, ix] = rng.normal(size=3)
    analytic = render_backward(view, grad_rgb, verts)
    h = 1e-4
    checked = 0
    for vi in range(4):
        for axis in range(3):
            vp, vm = verts.copy(), verts.copy()
            vp[vi, axis] += h
            vm[vi, axis] -= h
            lp = float((render(vp, faces, colors, cam).rgb * grad_rgb).sum())
            lm = float((render(vm, faces, colors, cam).rgb * grad_rgb).sum())
            fd = (lp - lm) / (2 * h)
            if abs(fd) > 1e-7:
                assert abs(analytic[vi, axis] - fd) / abs(fd) < 1e-2
                checked += 1
    assert checked >= 5


def test_silhouette_translation_gradient():
    """Pixel-weighted deviation-from-background loss vs. finite differences
    under whole-mesh translation parallel to the image plane."""
    v, f = icosphere(1)
    cam = Camera(0.0, 0.0, 3.0, (0, 0, 0), 45.0, 64)
    weights = np.random.default_rng(3).uniform(0.2, 1.0, size=(64, 64, 1))

    def loss(vv):
        return float((weights * (render(vv, f, None, cam).rgb - BG) ** 2).sum())

    view = render(v, f, None, cam)
    grad_rgb = 2.0 * weights * (view.rgb - BG)
    g = render_backward(view, grad_rgb, v)
    delta = 1e-4
    for axis in (0, 1):                  # x and y are parallel to this image plane
        step = np.zeros(3)
        step[axis] = delta
        fd = (loss(v + step) - loss(v - step)) / (2 * delta)
        analytic = float(g[:, axis].sum())
        assert abs(fd - analytic) / max(abs(fd), 1e-9) < 0.05


def test_band_pixels_receive_gradients():
    v, f = icosphere(1)
    view = render(v, f, None, Camera(10.0, 20.0, 3.0))
    band = np.argwhere((view.alpha > 0.05) & (view.alpha < 0.95))
    assert len(band) > 0
    iy, ix = band[0]
    grad_rgb = np.zeros_like(view.rgb)
    grad_rgb[iy, ix] = 1.0
    g = render_backward(view, grad_rgb, v)
    assert np.abs(g).max() > 0.0


def test_occluded_face_gets_zero_gradient():
    """A quad strictly behind a larger quad: covered pixels belong to the front
    faces only, so the hidden quad's vertices receive no gradient."""
    front = np.array([(-2, -2, 0.5), (2, -2, 0.5), (2, 2, 0.5), (-2, 2, 0.5)], float)
    back = np.array([(-1, -1, -0.5), (1, -1, -0.5), (1, 1, -0.5), (-1, 1, -0.5)], float)
    verts = np.vstack([front, back])
    faces = np.array([(0, 1, 2), (0, 2, 3), (4, 5, 6), (4, 6, 7)])
    cam = Camera(15.0, 10.0, 4.0, (0, 0, 0), 60.0, 64)
    view = render(verts, faces, None, cam)
    assert set(np.unique(view.face_ids)) <= {-1, 0, 1}
    grad_rgb = np.zeros_like(view.rgb)
    covered = view.face_ids >= 0
    grad_rgb[covered] = np.random.default_rng(0).normal(size=(covered.sum(), 3))
    g = render_backward(view, grad_rgb, verts)
    assert np.abs(g[4:]).max() == 0.0
    assert np.abs(g[:4]).max() > 0.0


def test_save_png(tmp_path):
    v, f = icosphere(0)
    view = render(v, f, None, Camera(0, 0, 3.0, image_size=32))
    out = tmp_path / "snap.png"
    save_png(view.rgb, out)
    from PIL import Image

    with Image.open(out) as im:
        assert im.size == (32, 32)
