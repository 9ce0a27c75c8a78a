"""Language-conditioned encoder-decoder generator and attention compositing.

The generator consumes the image concatenated with its attention map plus a
language vector (question embedding joined with the answer weight row). The
language vector is split into one slice per encoder level; each slice is
linearly mapped to a 1x1 convolution kernel that reconditions that level's
feature maps before they feed the decoder and its skip connections. The raw
output is spliced into the original background through the attention map:
counterfactual = M * generated + (1 - M) * original.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint


@dataclass
class LanguageEmbedding:
    """Concatenated [question embedding; answer embedding] plus its m slices.

    Slices come from a zero-padded copy when the length is not divisible by m;
    x_bar itself is never padded.
    """

    x_bar: np.ndarray
    slices: list[np.ndarray]

    @property
    def m(self) -> int:
        return len(self.slices)


def split_language(x_bar: np.ndarray, m: int) -> list[np.ndarray]:
    """Split into m equally sized slices, zero-padding the tail if needed."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n = len(x_bar)
    slice_len = math.ceil(n / m)
    padded = np.zeros(slice_len * m, dtype=x_bar.dtype)
    padded[:n] = x_bar
    return [padded[i * slice_len : (i + 1) * slice_len] for i in range(m)]


def build_language_embedding(q_bar: np.ndarray, a_bar: np.ndarray, m: int = 3) -> LanguageEmbedding:
    q_bar = np.asarray(q_bar, dtype=np.float32)
    a_bar = np.asarray(a_bar, dtype=np.float32)
    if not (np.isfinite(q_bar).all() and np.isfinite(a_bar).all()):
        raise ValueError("language embeddings must be finite")
    x_bar = np.concatenate([q_bar, a_bar])
    return LanguageEmbedding(x_bar=x_bar, slices=split_language(x_bar, m))


def apply_language_kernel(features: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """1x1 convolution with an explicit (possibly per-sample) kernel.

    features: (B, C_in, H, W); kernel: (C_out, C_in) shared or (B, C_out, C_in).
    """
    if kernel.dim() == 2:
        if kernel.shape[1] != features.shape[1]:
            raise ValueError(f"kernel {tuple(kernel.shape)} does not match {features.shape[1]} channels")
        return torch.einsum("bchw,dc->bdhw", features, kernel)
    if kernel.dim() == 3:
        if kernel.shape[0] != features.shape[0] or kernel.shape[2] != features.shape[1]:
            raise ValueError(f"kernel {tuple(kernel.shape)} does not match features {tuple(features.shape)}")
        return torch.einsum("bchw,bdc->bdhw", features, kernel)
    raise ValueError("kernel must be (C_out, C_in) or (B, C_out, C_in)")


def condition_features(features: torch.Tensor, lang_slice: torch.Tensor, transform: nn.Linear) -> torch.Tensor:
    """Recondition feature maps with the 1x1 kernel emitted for this slice."""
    channels = features.shape[1]
    kernel = transform(lang_slice)
    if lang_slice.dim() == 1:
        kernel = kernel.reshape(channels, channels)
    else:
        kernel = kernel.reshape(lang_slice.shape[0], channels, channels)
    return apply_language_kernel(features, kernel)


@dataclass
class GeneratorConfig:
    in_channels: int = 4  # RGB + attention map
    base_channels: int = 32
    depth: int = 3
    lang_dim: int = 128  # |q_bar| + |a_bar|
    m: int | None = None  # language slices; defaults to depth

    def resolved_m(self) -> int:
        return self.m if self.m is not None else self.depth


class GeneratorNet(nn.Module):
    """Encoder-decoder with skip connections and per-level language kernels.

    Output passes through a sigmoid, so generated images live in [0, 1] and
    compositing stays a convex combination.
    """

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        c = self.config
        m = c.resolved_m()
        self.slice_len = math.ceil(c.lang_dim / m)

        channels = [c.base_channels * (2**j) for j in range(c.depth)]
        self.encoders = nn.ModuleList()
        self.lang_transforms = nn.ModuleList()
        prev = c.in_channels
        for ch in channels:
            self.encoders.append(nn.Conv2d(prev, ch, 4, stride=2, padding=1))
            prev = ch
        for j in range(c.depth):
            ch = channels[j]
            # kernel emitters start as a small perturbation around the
            # identity so early training does not wipe out encoder features
            lin = nn.Linear(self.slice_len, ch * ch)
            nn.init.normal_(lin.weight, std=1e-3)
            eye = torch.eye(ch).reshape(-1)
            with torch.no_grad():
                lin.bias.copy_(eye)
            self.lang_transforms.append(lin)

        self.decoders = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for j in reversed(range(1, c.depth)):
            self.decoders.append(nn.ConvTranspose2d(channels[j], channels[j - 1], 4, stride=2, padding=1))
            self.fuse.append(nn.Conv2d(2 * channels[j - 1], channels[j - 1], 3, padding=1))
        self.up_final = nn.ConvTranspose2d(channels[0], c.base_channels // 2, 4, stride=2, padding=1)
        self.head = nn.Conv2d(c.base_channels // 2, 3, 3, padding=1)

    def forward(self, images_with_attention: torch.Tensor, language: torch.Tensor) -> torch.Tensor:
        c = self.config
        if language.dim() == 1:
            language = language.unsqueeze(0)
        slice_len = self.slice_len
        padded = F.pad(language, (0, slice_len * c.resolved_m() - language.shape[1]))

        feats = []
        x = images_with_attention
        for j, enc in enumerate(self.encoders):
            x = F.leaky_relu(enc(x), 0.2)
            lang_slice = padded[:, j * slice_len : (j + 1) * slice_len]
            x = condition_features(x, lang_slice, self.lang_transforms[j])
            feats.append(x)

        x = feats[-1]
        for i, (dec, fuse) in enumerate(zip(self.decoders, self.fuse)):
            x = F.leaky_relu(dec(x), 0.2)
            skip = feats[len(feats) - 2 - i]
            x = F.leaky_relu(fuse(torch.cat([x, skip], dim=1)), 0.2)
        x = F.leaky_relu(self.up_final(x), 0.2)
        return torch.sigmoid(self.head(x))


def generate(
    image: np.ndarray,
    attention: np.ndarray,
    language: LanguageEmbedding | np.ndarray,
    net: GeneratorNet,
) -> np.ndarray:
    """Single-sample raw generation; returns an (h, w, 3) image in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (h, w, 3), got {image.shape}")
    m = np.asarray(attention, dtype=np.float32)
    if m.ndim == 3:
        m = m[0]
    if m.shape != image.shape[:2]:
        raise ValueError(f"attention {m.shape} does not match image {image.shape[:2]}")
    x_bar = language.x_bar if isinstance(language, LanguageEmbedding) else np.asarray(language)
    net.eval()
    with torch.no_grad():
        img_t = torch.as_tensor(image.transpose(2, 0, 1), dtype=torch.float32)
        inp = torch.cat([img_t, torch.as_tensor(m).unsqueeze(0)], dim=0).unsqueeze(0)
        lang_t = torch.as_tensor(x_bar, dtype=torch.float32).unsqueeze(0)
        out = net(inp, lang_t)
    return out[0].numpy().transpose(1, 2, 0)


def composite(generated: np.ndarray, original: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """counterfactual = M * generated + (1 - M) * original, elementwise."""
    if generated.shape != original.shape:
        raise ValueError(f"shape mismatch: generated {generated.shape} vs original {original.shape}")
    m = np.asarray(attention)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.shape != original.shape[:2]:
        raise ValueError(f"attention {m.shape} does not match image plane {original.shape[:2]}")
    m = m[..., None]
    return m * generated + (1.0 - m) * original


def composite_torch(generated: torch.Tensor, original: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Batched channel-first compositing used inside training graphs."""
    return attention * generated + (1.0 - attention) * original


def generator_checkpoint_meta(net: GeneratorNet) -> dict:
    return {"kind": "generator", "config": dataclasses.asdict(net.config)}


def save_generator(net: GeneratorNet, path) -> None:
    save_checkpoint(path, net.state_dict(), generator_checkpoint_meta(net))


def load_generator(path) -> GeneratorNet:
    state, meta = load_checkpoint(path)
    net = GeneratorNet(GeneratorConfig(**meta["config"]))
    net.load_state_dict(state)
    net.eval()
    return net
