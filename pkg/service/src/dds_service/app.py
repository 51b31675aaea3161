"""HTTP endpoints for the guidance service (wire protocol "dds/1").

POST /v1/dds takes base64-encoded float32 view batches and returns per-pixel
gradients; GET /v1/health reports readiness and the loaded model. Requests are
validated by hand so every 400 names the offending field, and are served
serially per device. Model seed and device come from the environment
(DDS_SERVICE_SEED, DDS_SERVICE_DEVICE).
"""

from __future__ import annotations

import base64
import math
import os
import threading
from contextlib import asynccontextmanager

import numpy as np
from fastapi import Body, FastAPI
from fastapi.responses import JSONResponse

from dds_service.denoiser import DOWNSCALE, DenoiserSession

PROTOCOL_VERSION = "dds/1"

_session: DenoiserSession | None = None
_lock = threading.Lock()


@asynccontextmanager
async def _lifespan(app: FastAPI):
    global _session
    seed = int(os.environ.get("DDS_SERVICE_SEED", "0"))
    device = os.environ.get("DDS_SERVICE_DEVICE", "cpu")
    _session = DenoiserSession(seed=seed, device=device)
    yield


app = FastAPI(title="dds-service", lifespan=_lifespan)


class RequestError(ValueError):
    """Validation failure; the message names the field."""


def _bad(field: str, why: str):
    raise RequestError(f"{field}: {why}")


def _decode_batch(field: str, payloads) -> np.ndarray:
    if not isinstance(payloads, list) or not payloads:
        _bad(field, "must be a non-empty list of base64 strings")
    images = []
    side = None
    for k, item in enumerate(payloads):
        if not isinstance(item, str):
            _bad(f"{field}[{k}]", "must be a base64 string")
        try:
            raw = base64.b64decode(item.encode("ascii"), validate=True)
        except Exception:
            _bad(f"{field}[{k}]", "is not valid base64")
        n_float = len(raw) // 4
        if len(raw) % 4 or n_float % 3:
            _bad(f"{field}[{k}]", f"has {len(raw)} bytes, not a float32 HxWx3 image")
        hw = n_float // 3
        s = math.isqrt(hw)
        if s * s != hw:
            _bad(f"{field}[{k}]", "is not a square image")
        if s % DOWNSCALE:
            _bad(f"{field}[{k}]", f"side {s} is not divisible by {DOWNSCALE}")
        if side is None:
            side = s
        elif s != side:
            _bad(f"{field}[{k}]", f"size {s} differs from first image size {side}")
        images.append(np.frombuffer(raw, dtype="<f4").reshape(s, s, 3))
    return np.stack(images)


def _encode_batch(grads: np.ndarray) -> list[str]:
    return [base64.b64encode(np.ascontiguousarray(g, dtype="<f4").tobytes()).decode("ascii")
            for g in grads]


def _direction_word(azimuth: float) -> str:
    az = abs((azimuth + 180.0) % 360.0 - 180.0)
    if az <= 45.0:
        return "front"
    if az >= 135.0:
        return "back"
    return "side"


def _parse(body: dict):
    if not isinstance(body, dict):
        _bad("body", "must be a JSON object")
    prompt = body.get("prompt")
    if not isinstance(prompt, str):
        _bad("prompt", "must be a string")
    mode = body.get("mode", "dds")
    if mode not in ("dds", "sds"):
        _bad("mode", "must be 'dds' or 'sds'")
    scale = body.get("guidance_scale", 100.0)
    if not isinstance(scale, (int, float)) or isinstance(scale, bool) or scale <= 0:
        _bad("guidance_scale", "must be a positive number")
    seed = body.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        _bad("seed", "must be an integer")
    trange = body.get("timestep_range", [0.05, 0.95])
    ok = (isinstance(trange, list) and len(trange) == 2
          and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in trange)
          and 0.0 <= trange[0] < trange[1] <= 1.0)
    if not ok:
        _bad("timestep_range", "must be [lo, hi] with 0 <= lo < hi <= 1")
    augment = body.get("view_prompt_augment", False)
    if not isinstance(augment, bool):
        _bad("view_prompt_augment", "must be a boolean")

    edit = _decode_batch("edit_images", body.get("edit_images"))
    n = edit.shape[0]
    ref = None
    if mode == "dds":
        ref = _decode_batch("ref_images", body.get("ref_images"))
        if ref.shape != edit.shape:
            _bad("ref_images", f"batch shape {ref.shape} != edit batch {edit.shape}")

    azimuths = body.get("azimuths", [0.0] * n)
    ok = (isinstance(azimuths, list) and len(azimuths) == n
          and all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in azimuths))
    if not ok:
        _bad("azimuths", f"must be a list of {n} numbers")

    if augment:
        prompts = [f"{_direction_word(a)} view of {prompt}" for a in azimuths]
    else:
        prompts = [prompt] * n
    return edit, ref, prompts, mode, float(scale), seed, (float(trange[0]), float(trange[1]))


@app.get("/v1/health")
def health():
    if _session is None:
        return JSONResponse(status_code=503, content={"status": "loading"})
    return {"status": "ok", "model": _session.model_id}


@app.post("/v1/dds")
def compute_dds(body: dict = Body(...)):
    if _session is None:
        return JSONResponse(status_code=503, content={"detail": "model not loaded"})
    try:
        edit, ref, prompts, mode, scale, seed, trange = _parse(body)
    except RequestError as exc:
        return JSONResponse(status_code=400, content={"detail": str(exc)})
    try:
        with _lock:                       # one request at a time per device
            grads, timesteps = _session.score_gradients(
                edit, ref, prompts, mode, scale, seed, trange)
    except torch_oom_errors() as exc:
        return JSONResponse(status_code=503, content={"detail": f"out of memory: {exc}"})
    return {
        "version": PROTOCOL_VERSION,
        "gradients": _encode_batch(grads),
        "timesteps": [float(t) for t in timesteps],
        "model": _session.model_id,
        "prompts_used": prompts,
    }


def torch_oom_errors():
    import torch

    return (torch.cuda.OutOfMemoryError, MemoryError)
