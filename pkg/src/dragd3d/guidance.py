"""Guidance providers: per-pixel loss gradients for batches of rendered views.

A provider scores a batch of (edit, reference) view pairs and returns raw
per-pixel gradients; ``dds_gradients`` validates shapes and applies the
gradient scale. Two providers ship: a deterministic mock (quadratic pull
toward a target image, so the whole pipeline runs offline) and a wire client
for the diffusion service speaking protocol "dds/1".
"""

from __future__ import annotations

import base64
import os
import time
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = "dds/1"
GUIDANCE_URL_ENV = "DRAGD3D_GUIDANCE_URL"


class GuidanceError(RuntimeError):
    """Base class for guidance failures."""


class GuidanceShapeError(GuidanceError):
    """Request/response tensor shapes are inconsistent (fatal)."""


class GuidanceUnavailableError(GuidanceError):
    """The provider could not be reached after retries (retryable exhausted)."""


class GuidanceProtocolError(GuidanceError):
    """The service speaks an unexpected protocol version (fatal)."""


@dataclass(frozen=True)
class GuidanceConfig:
    provider: str = "mock"                      # "mock" | "service"
    service_url: str | None = None
    guidance_scale: float = 100.0
    gradient_scale: float = 2e-5
    timestep_range: tuple[float, float] = (0.05, 0.95)
    noise_weight: float = 1.0                   # w(t), constant
    mode: str = "dds"                           # "dds" | "sds" (ablation)
    view_prompt_augment: bool = False           # service-side directional prompts

    def __post_init__(self):
        if self.guidance_scale <= 0 or self.gradient_scale <= 0:
            raise ValueError("guidance_scale and gradient_scale must be positive")
        lo, hi = self.timestep_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("timestep_range must satisfy 0 <= lo < hi <= 1")
        if self.mode not in ("dds", "sds"):
            raise ValueError("mode must be 'dds' or 'sds'")


@dataclass
class GuidanceRequest:
    edit_images: np.ndarray        # (N, H, W, 3) in [0, 1]
    ref_images: np.ndarray         # same shape
    prompt: str
    camera_azimuths: np.ndarray    # (N,) degrees
    seed: int
    guidance_scale: float = 100.0
    gradient_scale: float = 2e-5

    def validate(self):
        e, r = np.asarray(self.edit_images), np.asarray(self.ref_images)
        if e.shape != r.shape:
            raise GuidanceShapeError(f"edit batch {e.shape} != ref batch {r.shape}")
        if e.ndim != 4 or e.shape[-1] != 3:
            raise GuidanceShapeError(f"expected (N, H, W, 3) batches, got {e.shape}")
        if len(self.camera_azimuths) != e.shape[0]:
            raise GuidanceShapeError("one azimuth per view required")
        for name, arr in (("edit", e), ("ref", r)):
            if not np.isfinite(arr).all() or arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
                raise GuidanceShapeError(f"{name} images must be finite and in [0, 1]")


@dataclass
class GuidanceResponse:
    pixel_gradients: np.ndarray    # (N, H, W, 3), already multiplied by gradient_scale
    timestep_used: np.ndarray      # (N,)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ProviderResult:
    raw_gradients: np.ndarray
    timesteps: np.ndarray
    scalar: float | None = None    # unscaled diagnostic loss value, when computable


class MockProvider:
    """Deterministic stand-in for the denoiser.

    The per-branch score for an image x against target T is the gradient of
    ||x - T||^2, i.e. 2 (x - T); in "dds" mode the reference branch is
    subtracted, in "sds" mode it is dropped. With no explicit target, the
    reference views themselves act as the target.
    """

    def __init__(self, target_images: np.ndarray | None = None, mode: str = "dds"):
        if mode not in ("dds", "sds"):
            raise ValueError("mode must be 'dds' or 'sds'")
        self.mode = mode
        self.targets = None if target_images is None else np.asarray(
            target_images, dtype=np.float64)

    def score(self, request: GuidanceRequest) -> ProviderResult:
        edit = np.asarray(request.edit_images, dtype=np.float64)
        ref = np.asarray(request.ref_images, dtype=np.float64)
        if self.targets is None:
            target = ref
        else:
            target = np.broadcast_to(self.targets, edit.shape)
        grads = 2.0 * (edit - target)
        scalar = float(np.mean(np.sum((edit - target) ** 2, axis=(1, 2, 3))))
        if self.mode == "dds":
            grads = grads - 2.0 * (ref - target)
            scalar -= float(np.mean(np.sum((ref - target) ** 2, axis=(1, 2, 3))))
        n = edit.shape[0]
        return ProviderResult(
            raw_gradients=grads,
            timesteps=np.full(n, 0.5),
            scalar=scalar,
        )


def encode_image_b64(image: np.ndarray) -> str:
    """Wire encoding: base64 of float32 little-endian H x W x 3, row-major."""
    arr = np.ascontiguousarray(image, dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_image_b64(payload: str, height: int, width: int) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"))
    expected = height * width * 3 * 4
    if len(raw) != expected:
        raise GuidanceShapeError(
            f"image payload has {len(raw)} bytes, expected {expected} for {height}x{width}x3")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width, 3).astype(np.float64)


class ServiceProvider:
    """HTTP client for the diffusion service (protocol "dds/1")."""

    def __init__(self, config: GuidanceConfig, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 120.0):
        import requests

        url = os.environ.get(GUIDANCE_URL_ENV) or config.service_url
        if not url:
            raise ValueError("service provider needs a service_url (or "
                             f"{GUIDANCE_URL_ENV} in the environment)")
        self.url = url.rstrip("/")
        self.mode = config.mode
        self.config = config
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._session = requests.Session()
        self._check_health()

    def _check_health(self):
        import requests

        last = None
        for attempt in range(self.retries):
            try:
                resp = self._session.get(f"{self.url}/v1/health", timeout=self.timeout)
                if resp.status_code == 200 and resp.json().get("status") == "ok":
                    self.model = resp.json().get("model", "unknown")
                    return
                last = f"health returned {resp.status_code}"
            except requests.RequestException as exc:
                last = str(exc)
            time.sleep(self.backoff * (2 ** attempt))
        raise GuidanceUnavailableError(f"guidance service not reachable at {self.url}: {last}")

    def score(self, request: GuidanceRequest) -> ProviderResult:
        import requests

        edit = np.asarray(request.edit_images, dtype=np.float64)
        ref = np.asarray(request.ref_images, dtype=np.float64)
        n, h, w, _ = edit.shape
        body = {
            "prompt": request.prompt,
            "mode": self.mode,
            "guidance_scale": float(request.guidance_scale),
            "seed": int(request.seed),
            "timestep_range": list(self.config.timestep_range),
            "azimuths": [float(a) for a in request.camera_azimuths],
            "view_prompt_augment": self.config.view_prompt_augment,
            "edit_images": [encode_image_b64(im) for im in edit],
            "ref_images": [encode_image_b64(im) for im in ref],
        }
        last = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(f"{self.url}/v1/dds", json=body, timeout=self.timeout)
                break
            except requests.RequestException as exc:
                last = str(exc)
                time.sleep(self.backoff * (2 ** attempt))
        else:
            raise GuidanceUnavailableError(f"guidance request failed after retries: {last}")
        if resp.status_code != 200:
            raise GuidanceError(f"service returned {resp.status_code}: {resp.text[:200]}")
        payload = resp.json()
        if payload.get("version") != PROTOCOL_VERSION:
            raise GuidanceProtocolError(
                f"protocol version mismatch: got {payload.get('version')!r}, "
                f"expected {PROTOCOL_VERSION!r}")
        grads_b64 = payload.get("gradients", [])
        if len(grads_b64) != n:
            raise GuidanceShapeError(f"service returned {len(grads_b64)} gradients for {n} views")
        grads = np.stack([decode_image_b64(g, h, w) for g in grads_b64])
        timesteps = np.asarray(payload.get("timesteps", [0.0] * n), dtype=np.float64)
        if timesteps.shape != (n,):
            raise GuidanceShapeError("service returned a malformed timesteps list")
        return ProviderResult(raw_gradients=grads, timesteps=timesteps, scalar=None)


def mock_provider(target_images: np.ndarray | None = None, mode: str = "dds") -> MockProvider:
    return MockProvider(target_images=target_images, mode=mode)


def service_provider(config: GuidanceConfig) -> ServiceProvider:
    return ServiceProvider(config)


def dds_gradients(request: GuidanceRequest, provider) -> GuidanceResponse:
    """Validate, score, and scale a guidance request.

    The returned gradients are the provider's raw scores multiplied by the
    request's gradient_scale; shape mismatches are fatal.
    """
    request.validate()
    result = provider.score(request)
    raw = np.asarray(result.raw_gradients, dtype=np.float64)
    edit = np.asarray(request.edit_images)
    if raw.shape != edit.shape:
        raise GuidanceShapeError(
            f"provider returned gradients of shape {raw.shape}, expected {edit.shape}")
    if not np.isfinite(raw).all():
        raise GuidanceError("provider returned non-finite gradients")
    grads = raw * request.gradient_scale
    diagnostics = {
        "gradient_norms": [float(np.linalg.norm(g)) for g in grads],
    }
    if result.scalar is not None:
        diagnostics["scalar"] = float(result.scalar * request.gradient_scale)
    return GuidanceResponse(
        pixel_gradients=grads,
        timestep_used=np.asarray(result.timesteps, dtype=np.float64),
        diagnostics=diagnostics,
    )
