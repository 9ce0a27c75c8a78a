"""Training losses: attention-weighted reconstruction, answer-flip pressure,
and the adversarial patch terms, combined into one weighted generator objective.

The reconstruction term only penalizes deviations outside the attention map
(mean of [(1 - M) * (I - I_hat)]^2), so question-critical regions stay free to
change. The flip term is log p(A) on the counterfactual: minimizing it pushes
the original answer's probability down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

FLIP_EPS = 1e-7


class TrainingDivergenceError(RuntimeError):
    """Raised when a loss component stops being finite."""


@dataclass
class LossWeights:
    lambda_rec: float = 10.0
    lambda_adv: float = 1.0
    lambda_flip: float = 1.0


@dataclass
class LossBreakdown:
    recon: float
    flip: float
    adv_g: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def as_dict(self) -> dict:
        return {
            "recon": self.recon,
            "flip": self.flip,
            "adv_g": self.adv_g,
            "total": self.total,
            "lambda_rec": self.weights.lambda_rec,
            "lambda_adv": self.weights.lambda_adv,
            "lambda_flip": self.weights.lambda_flip,
        }


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def weighted_recon_loss(original, generated, attention) -> torch.Tensor:
    """Mean over pixels and channels of [(1 - M) * (I - I_hat)]^2."""
    original = _as_tensor(original)
    generated = _as_tensor(generated)
    attention = _as_tensor(attention)
    if original.shape != generated.shape:
        raise ValueError(f"shape mismatch: {tuple(original.shape)} vs {tuple(generated.shape)}")
    diff = (1.0 - attention) * (original - generated)
    return (diff**2).mean()


def flip_loss(probabilities, answer: int | torch.Tensor, eps: float = FLIP_EPS) -> torch.Tensor:
    """log p(answer), clamped to [eps, 1 - eps]; batch inputs are averaged."""
    probs = _as_tensor(probabilities)
    if probs.dim() == 1:
        p = probs[int(answer)]
        return torch.log(torch.clamp(p, eps, 1.0 - eps))
    idx = torch.as_tensor(answer, dtype=torch.long).reshape(-1, 1)
    p = probs.gather(1, idx).squeeze(1)
    return torch.log(torch.clamp(p, eps, 1.0 - eps)).mean()


def adversarial_losses(disc_real, disc_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Patchwise binary cross-entropy on logits.

    d_loss = 0.5 * [BCE(real, 1) + BCE(fake, 0)]; g_loss = BCE(fake, 1),
    the non-saturating generator form.
    """
    real = _as_tensor(disc_real)
    fake = _as_tensor(disc_fake)
    if real.shape != fake.shape:
        raise ValueError(f"patch grids differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    d_loss = 0.5 * (
        F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
        + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake))
    )
    g_loss = F.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))
    return d_loss, g_loss


def total_generator_loss(
    recon: float, flip: float, adv_g: float, weights: LossWeights | None = None
) -> LossBreakdown:
    """Weighted sum of the generator's three pressures, with finiteness checks."""
    weights = weights or LossWeights()
    components = {"recon": float(recon), "flip": float(flip), "adv_g": float(adv_g)}
    bad = [name for name, value in components.items() if not math.isfinite(value)]
    if bad:
        raise TrainingDivergenceError(f"non-finite loss component(s): {', '.join(bad)}")
    total = (
        weights.lambda_rec * components["recon"]
        + weights.lambda_adv * components["adv_g"]
        + weights.lambda_flip * components["flip"]
    )
    return LossBreakdown(
        recon=components["recon"],
        flip=components["flip"],
        adv_g=components["adv_g"],
        total=total,
        weights=weights,
    )
