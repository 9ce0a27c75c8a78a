"""PatchGAN realism discriminator with spectral normalization on every kernel.

Each convolutional kernel is reshaped to (c_out, c_in * k_w * k_h) and divided
by a power-iteration estimate of its largest singular value, keeping every
layer approximately 1-Lipschitz. The per-layer left singular vector estimate u
persists across training steps (one refinement step per forward in train mode).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint

SN_EPS = 1e-12


def l2_normalize(v: torch.Tensor, eps: float = SN_EPS) -> torch.Tensor:
    return v / (v.norm() + eps)


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_iterations: int = 1, eps: float = SN_EPS
) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide `weight` by its estimated largest singular value.

    Power iteration refines (u, v) without gradient; the estimate
    sigma = u^T W v stays differentiable with respect to the weight. A zero
    kernel is returned unchanged (sigma guarded at eps).
    """
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u_it = u.clone()
        v_it = None
        for _ in range(n_iterations):
            v_it = l2_normalize(mat.t().mv(u_it), eps)
            u_it = l2_normalize(mat.mv(v_it), eps)
    sigma = torch.dot(u_it, torch.mv(mat, v_it))
    if float(sigma.detach()) <= eps:
        return weight, u
    return weight / sigma, u_it


class SpectralConv2d(nn.Module):
    """Conv2d whose kernel is spectrally normalized at every forward pass.

    In training mode each forward runs one power-iteration step and persists
    the refined u; in eval mode the stored u is used without mutation, so
    inference is deterministic.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size)
        )
        nn.init.kaiming_normal_(self.weight, a=0.2)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.register_buffer("u", l2_normalize(torch.randn(out_channels)))

    def normalized_weight(self, n_iterations: int = 1, persist: bool = True) -> torch.Tensor:
        w_hat, u_new = spectral_normalize(self.weight, self.u, n_iterations)
        if persist:
            with torch.no_grad():
                self.u.copy_(u_new)
        return w_hat

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w_hat = self.normalized_weight(n_iterations=1, persist=self.training)
        return F.conv2d(x, w_hat, self.bias, stride=self.stride, padding=self.padding)


@dataclass
class DiscriminatorConfig:
    in_channels: int = 3
    base_channels: int = 32
    # three stride-2 valid convolutions: 64 -> 31 -> 14 -> 6 patch grid,
    # receptive field 22 pixels per patch
    depth: int = 3


class PatchDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        c = self.config
        layers = []
        prev = c.in_channels
        for j in range(c.depth):
            ch = c.base_channels * (2**j)
            layers.append(SpectralConv2d(prev, ch, 4, stride=2, padding=0))
            prev = ch
        self.convs = nn.ModuleList(layers)
        self.head = SpectralConv2d(prev, 1, 1)

    def conv_layers(self) -> list[SpectralConv2d]:
        return [*self.convs, self.head]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x)

    def refresh_normalization(self, n_iterations: int = 1) -> dict[str, torch.Tensor]:
        """Re-run power iteration on every layer; returns the normalized kernels."""
        out = {}
        for name, layer in zip(self._layer_names(), self.conv_layers()):
            out[name] = layer.normalized_weight(n_iterations=n_iterations).detach()
        return out

    def _layer_names(self) -> list[str]:
        return [f"conv{j}" for j in range(len(self.convs))] + ["head"]


def patch_forward(disc: PatchDiscriminator, image: np.ndarray) -> np.ndarray:
    """Patch logit grid for a single (h, w, 3) image in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != disc.config.in_channels:
        raise ValueError(f"expected (h, w, {disc.config.in_channels}) image, got {image.shape}")
    if image.min() < -1e-6 or image.max() > 1 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    disc.eval()
    with torch.no_grad():
        x = torch.as_tensor(image.transpose(2, 0, 1), dtype=torch.float32).unsqueeze(0)
        logits = disc(x)
    return logits[0, 0].numpy().copy()


def discriminator_checkpoint_meta(disc: PatchDiscriminator) -> dict:
    return {"kind": "discriminator", "config": dataclasses.asdict(disc.config)}


def save_discriminator(disc: PatchDiscriminator, path) -> None:
    # state_dict includes the persisted power-iteration u buffers
    save_checkpoint(path, disc.state_dict(), discriminator_checkpoint_meta(disc))


def load_discriminator(path) -> PatchDiscriminator:
    state, meta = load_checkpoint(path)
    disc = PatchDiscriminator(DiscriminatorConfig(**meta["config"]))
    disc.load_state_dict(state)
    disc.eval()
    return disc
