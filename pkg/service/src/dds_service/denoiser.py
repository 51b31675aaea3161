"""Latent denoiser session and the score-gradient computation.

The session wraps a text-conditioned latent denoiser behind a small interface:
encode images to latent space, predict noise at a timestep under an optional
prompt. The default backend is a compact convolutional model with
deterministic seeded weights, so the service runs anywhere on CPU; swapping in
a large pretrained backbone only requires implementing the same three hooks.

The guidance math is backend-independent: sample a shared timestep and noise
per view, form the noised latents for the edit and reference branches,
combine conditioned and unconditioned predictions with the classifier-free
guidance weight, subtract the injected noise, difference the branches, and
backpropagate the latent residual through the encoder to pixel space. Because
both branches share noise, timestep, and weights, identical edit and reference
images yield exactly zero gradients.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn

LATENT_CHANNELS = 4
EMBED_DIM = 32
DOWNSCALE = 8          # input height/width must be divisible by this


def _seeded_normal(shape, generator, scale):
    w = torch.empty(shape)
    w.normal_(0.0, scale, generator=generator)
    return nn.Parameter(w)


class _Conv(nn.Module):
    """3x3 conv with seeded weights; optional stride-2 downsampling."""

    def __init__(self, cin, cout, stride, generator):
        super().__init__()
        scale = 1.0 / math.sqrt(cin * 9)
        self.weight = _seeded_normal((cout, cin, 3, 3), generator, scale)
        self.bias = _seeded_normal((cout,), generator, 0.01)
        self.stride = stride

    def forward(self, x):
        return torch.nn.functional.conv2d(x, self.weight, self.bias,
                                          stride=self.stride, padding=1)


class TinyLatentDenoiser(nn.Module):
    """Compact deterministic latent-diffusion stand-in.

    Encoder: three stride-2 convs, 3 -> 4 channels at 1/8 resolution.
    Noise predictor: convs over the noised latent concatenated with broadcast
    timestep and prompt features. All weights come from a seeded generator,
    so two processes with the same seed hold identical parameters.
    """

    model_id = "tiny-latent-v1"

    def __init__(self, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(int(seed))
        self.enc1 = _Conv(3, 16, 2, g)
        self.enc2 = _Conv(16, 32, 2, g)
        self.enc3 = _Conv(32, LATENT_CHANNELS, 2, g)
        self.prompt_proj = _seeded_normal((EMBED_DIM, LATENT_CHANNELS), g, 1.0 / math.sqrt(EMBED_DIM))
        self.den1 = _Conv(3 * LATENT_CHANNELS, 32, 1, g)
        self.den2 = _Conv(32, 32, 1, g)
        self.den3 = _Conv(32, LATENT_CHANNELS, 1, g)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) pixels in [0, 1] -> (N, 4, H/8, W/8) latents."""
        x = torch.nn.functional.silu(self.enc1(images * 2.0 - 1.0))
        x = torch.nn.functional.silu(self.enc2(x))
        return self.enc3(x)

    def prompt_embedding(self, prompt: str | None) -> torch.Tensor:
        """Hash-seeded pseudo text encoding; the empty conditioning is zero."""
        if prompt is None:
            return torch.zeros(EMBED_DIM)
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
        e = torch.empty(EMBED_DIM)
        e.normal_(0.0, 1.0, generator=g)
        return e

    def predict_noise(self, latents: torch.Tensor, t: torch.Tensor,
                      prompt: str | None) -> torch.Tensor:
        """Noise estimate for noised latents at timestep t (fraction in [0, 1])."""
        n, _, h, w = latents.shape
        emb = (self.prompt_embedding(prompt) @ self.prompt_proj)
        cond = emb.view(1, LATENT_CHANNELS, 1, 1).expand(n, LATENT_CHANNELS, h, w)
        tfeat = torch.stack([torch.sin(math.tau * t), torch.cos(math.tau * t),
                             t, 1.0 - t]).view(1, LATENT_CHANNELS, 1, 1)
        tcond = tfeat.to(latents.dtype).expand(n, LATENT_CHANNELS, h, w)
        x = torch.cat([latents, cond, tcond], dim=1)
        x = torch.nn.functional.silu(self.den1(x))
        x = torch.nn.functional.silu(self.den2(x))
        return self.den3(x)


def alpha_bar(t: torch.Tensor) -> torch.Tensor:
    """Cosine noise schedule, t in (0, 1)."""
    s = 0.008
    return torch.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2


class DenoiserSession:
    """Loaded-once model plus the per-request gradient computation."""

    def __init__(self, seed: int = 0, device: str = "cpu"):
        self.device = device
        self.model = TinyLatentDenoiser(seed=seed).to(device)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model_id = TinyLatentDenoiser.model_id

    def score_gradients(self, edit_images: np.ndarray, ref_images: np.ndarray | None,
                        prompts: list[str], mode: str, guidance_scale: float,
                        seed: int, timestep_range: tuple[float, float]):
        """Per-view pixel-space gradients and the timesteps used.

        edit_images / ref_images: (N, H, W, 3) float arrays in [0, 1].
        prompts: one conditioning string per view (already augmented if asked).
        """
        n, h, w, _ = edit_images.shape
        grads = np.empty((n, h, w, 3), dtype=np.float32)
        timesteps = np.empty(n, dtype=np.float64)
        lo, hi = timestep_range
        for k in range(n):
            g = torch.Generator().manual_seed((int(seed) * 1000003 + k) & 0x7FFFFFFF)
            t = lo + (hi - lo) * torch.rand(1, generator=g)
            eps = torch.randn((1, LATENT_CHANNELS, h // DOWNSCALE, w // DOWNSCALE),
                              generator=g)
            timesteps[k] = float(t)

            residual_edit, pix_grad_edit = self._branch(
                edit_images[k], prompts[k], t, eps, guidance_scale)
            if mode == "dds":
                _, pix_grad_ref = self._branch(
                    ref_images[k], prompts[k], t, eps, guidance_scale)
                grads[k] = pix_grad_edit - pix_grad_ref
            else:
                grads[k] = pix_grad_edit
        return grads, timesteps

    def _branch(self, image: np.ndarray, prompt: str, t: torch.Tensor,
                eps: torch.Tensor, guidance_scale: float):
        """One score-distillation branch: residual and its pixel pullback."""
        pixels = torch.tensor(
            np.ascontiguousarray(image, dtype=np.float32).transpose(2, 0, 1)[None],
            device=self.device, requires_grad=True)
        latents = self.model.encode(pixels)
        ab = alpha_bar(t).to(latents.dtype)
        x_t = torch.sqrt(ab) * latents + torch.sqrt(1.0 - ab) * eps
        with torch.no_grad():
            cond = self.model.predict_noise(x_t.detach(), t, prompt)
            uncond = self.model.predict_noise(x_t.detach(), t, None)
            combined = (1.0 + guidance_scale) * cond - guidance_scale * uncond
            residual = combined - eps
        # d x_t / d latents = sqrt(alpha_bar); pull the residual back to pixels
        cotangent = torch.sqrt(ab) * residual
        grad, = torch.autograd.grad(latents, pixels, grad_outputs=cotangent)
        return residual, grad[0].detach().numpy().transpose(1, 2, 0)
