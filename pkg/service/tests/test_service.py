import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from dds_service.app import app


def enc(img):
    return base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode()


def dec(payload, side):
    return np.frombuffer(base64.b64decode(payload), dtype="<f4").reshape(side, side, 3)


@pytest.fixture(scope="module")
def client():
    with TestClient(app) as c:
        yield c


def test_health_before_startup_is_503():
    # without the startup event the model is not loaded
    import dds_service.app as mod

    saved = mod._session
    mod._session = None
    try:
        bare = TestClient(app)
        assert bare.get("/v1/health").status_code == 503
    finally:
        mod._session = saved


def test_health_ok_when_warm(client):
    resp = client.get("/v1/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok" and body["model"]


def test_validation_names_fields(client):
    img = enc(np.zeros((16, 16, 3), dtype=np.float32))
    cases = [
        ({"edit_images": [img], "ref_images": [img]}, "prompt"),
        ({"prompt": "x", "mode": "nope", "edit_images": [img], "ref_images": [img]}, "mode"),
        ({"prompt": "x", "seed": "zero", "edit_images": [img], "ref_images": [img]}, "seed"),
        ({"prompt": "x", "guidance_scale": -1, "edit_images": [img], "ref_images": [img]},
         "guidance_scale"),
        ({"prompt": "x", "timestep_range": [0.9, 0.1], "edit_images": [img],
          "ref_images": [img]}, "timestep_range"),
        ({"prompt": "x", "edit_images": []}, "edit_images"),
        ({"prompt": "x", "edit_images": ["@@@"], "ref_images": [img]}, "edit_images[0]"),
        ({"prompt": "x", "edit_images": [img]}, "ref_images"),
        ({"prompt": "x", "edit_images": [img], "ref_images": [img],
          "azimuths": [1, 2, 3]}, "azimuths"),
    ]
    for body, field in cases:
        resp = client.post("/v1/dds", json=body)
        assert resp.status_code == 400, body
        assert field in resp.json()["detail"]


def test_non_square_and_wrong_stride_rejected(client):
    bad = enc(np.zeros((16, 8, 3), dtype=np.float32))      # 128 floats per channel: not square
    resp = client.post("/v1/dds", json={"prompt": "x", "edit_images": [bad],
                                        "ref_images": [bad]})
    assert resp.status_code == 400
    odd = enc(np.zeros((12, 12, 3), dtype=np.float32))     # square but not divisible by 8
    resp = client.post("/v1/dds", json={"prompt": "x", "edit_images": [odd],
                                        "ref_images": [odd]})
    assert resp.status_code == 400 and "divisible" in resp.json()["detail"]


def test_sds_mode_ignores_missing_refs(client):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32)
    resp = client.post("/v1/dds", json={"prompt": "x", "mode": "sds",
                                        "edit_images": [enc(img)]})
    assert resp.status_code == 200
    assert resp.json()["version"] == "dds/1"
    assert len(resp.json()["gradients"]) == 1


def test_response_shape_matches_request(client):
    rng = np.random.default_rng(1)
    edit = [enc(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32)) for _ in range(3)]
    ref = [enc(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32)) for _ in range(3)]
    resp = client.post("/v1/dds", json={"prompt": "x", "edit_images": edit,
                                        "ref_images": ref, "seed": 4})
    body = resp.json()
    assert len(body["gradients"]) == 3 and len(body["timesteps"]) == 3
    for g in body["gradients"]:
        assert dec(g, 16).shape == (16, 16, 3)
    lo, hi = 0.05, 0.95
    assert all(lo <= t <= hi for t in body["timesteps"])


def test_prompt_augmentation_direction_words(client):
    rng = np.random.default_rng(2)
    img = enc(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32))
    resp = client.post("/v1/dds", json={
        "prompt": "a cat", "mode": "sds", "edit_images": [img] * 4,
        "azimuths": [0.0, 90.0, 179.0, -100.0], "view_prompt_augment": True})
    assert resp.json()["prompts_used"] == [
        "front view of a cat", "side view of a cat",
        "back view of a cat", "side view of a cat"]


def test_augmented_prompt_changes_gradient(client):
    rng = np.random.default_rng(3)
    img = enc(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32))
    base = {"prompt": "a cat", "mode": "sds", "edit_images": [img],
            "azimuths": [170.0], "seed": 9}
    plain = client.post("/v1/dds", json=base).json()["gradients"][0]
    augmented = client.post("/v1/dds", json={**base, "view_prompt_augment": True})
    assert augmented.json()["gradients"][0] != plain


def test_guidance_scale_affects_output(client):
    rng = np.random.default_rng(4)
    e = enc(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32))
    r = enc(rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32))
    g1 = client.post("/v1/dds", json={"prompt": "x", "edit_images": [e], "ref_images": [r],
                                      "seed": 1, "guidance_scale": 10.0}).json()["gradients"][0]
    g2 = client.post("/v1/dds", json={"prompt": "x", "edit_images": [e], "ref_images": [r],
                                      "seed": 1, "guidance_scale": 100.0}).json()["gradients"][0]
    assert g1 != g2
