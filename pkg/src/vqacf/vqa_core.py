"""Small trainable VQA model exposing the introspection surface the
counterfactual pipeline needs: a designated final convolutional layer,
the pooled question embedding, and the classifier weight row per answer.

Fusion is elementwise throughout and documented here: the pooled question
embedding modulates each conv block's channels (per-channel scale and shift),
and the head multiplies projected image and question features before a single
linear classifier. Pure post-pooling product fusion could not bind attributes
to the queried object in multi-object scenes; the in-encoder modulation is
what makes the referent selection learnable at desk scale. The weight row
read out per answer excludes the classifier bias.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoints import load_checkpoint, save_checkpoint


class InputError(ValueError):
    """Raised on out-of-contract model inputs (range, shape, vocabulary)."""


@dataclass
class VqaModelConfig:
    q_dim: int = 64
    cam_channels: int = 64
    fuse_dim: int = 64
    pool_tau: float = 0.25  # temperature of the smooth-max pooling path


class VqaNet(nn.Module):
    """Question-modulated conv encoder with a designated final conv layer.

    `conv_cam` is the designated layer; its post-ReLU activations
    (K x u x v with u = v = h/4) are what the attention stage consumes.
    `head` maps those activations plus the question embedding to logits and is
    kept separate so logit gradients with respect to the activations can be
    taken directly.
    """

    CONV_WIDTHS = (32, 64, 96)

    def __init__(
        self,
        question_vocab: list[str],
        answer_vocab: list[str],
        config: VqaModelConfig | None = None,
    ):
        super().__init__()
        self.question_vocab = list(question_vocab)
        self.answer_vocab = list(answer_vocab)
        self.config = config or VqaModelConfig()
        c = self.config
        w1, w2, w3 = self.CONV_WIDTHS
        self.embed = nn.Embedding(len(question_vocab), c.q_dim)
        self.conv1 = nn.Conv2d(3, w1, 3, padding=1)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1)
        self.conv3 = nn.Conv2d(w2, w3, 3, padding=1)
        self.conv_cam = nn.Conv2d(w3, c.cam_channels, 1)
        self.bn1 = nn.BatchNorm2d(w1, affine=False)
        self.bn2 = nn.BatchNorm2d(w2, affine=False)
        self.bn3 = nn.BatchNorm2d(w3, affine=False)
        # per-channel scale/shift of each block from the question embedding
        self.film1 = nn.Linear(c.q_dim, 2 * w1)
        self.film2 = nn.Linear(c.q_dim, 2 * w2)
        self.film3 = nn.Linear(c.q_dim, 2 * w3)
        self.img_proj = nn.Linear(2 * c.cam_channels, c.fuse_dim)
        self.q_proj = nn.Linear(c.q_dim, c.fuse_dim)
        self.classifier = nn.Linear(c.fuse_dim, len(answer_vocab))
        self.pool = nn.MaxPool2d(2)

    def question_embedding(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.embed(tokens) * mask.unsqueeze(-1)
        return emb.sum(dim=1) / mask.sum(dim=1, keepdim=True).clamp(min=1.0)

    def _modulate(self, x: torch.Tensor, bn: nn.Module, film: nn.Linear, q_bar: torch.Tensor) -> torch.Tensor:
        channels = x.shape[1]
        gamma_beta = film(q_bar)
        gamma = gamma_beta[:, :channels, None, None]
        beta = gamma_beta[:, channels:, None, None]
        return F.relu((1.0 + gamma) * bn(x) + beta)

    def image_activations(self, images: torch.Tensor, q_bar: torch.Tensor) -> torch.Tensor:
        x = self.pool(self._modulate(self.conv1(images), self.bn1, self.film1, q_bar))
        x = self.pool(self._modulate(self.conv2(x), self.bn2, self.film2, q_bar))
        x = self._modulate(self.conv3(x), self.bn3, self.film3, q_bar)
        return F.relu(self.conv_cam(x))

    def head(self, activations: torch.Tensor, q_bar: torch.Tensor) -> torch.Tensor:
        b, k, u, v = activations.shape
        cells = activations.reshape(b, k, u * v)
        tau = self.config.pool_tau
        # smooth-max pooling: differentiable everywhere, unlike a hard max
        smooth_max = tau * (torch.logsumexp(cells / tau, dim=2) - float(np.log(u * v)))
        pooled = torch.cat([cells.mean(dim=2), smooth_max], dim=1)
        fused = self.img_proj(pooled) * self.q_proj(q_bar)
        return self.classifier(fused)

    def forward(self, images: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q_bar = self.question_embedding(tokens, mask)
        return self.head(self.image_activations(images, q_bar), q_bar)


@dataclass
class VqaOutput:
    logits: np.ndarray
    predicted: int
    probabilities: np.ndarray
    q_bar: np.ndarray
    a_bar: np.ndarray  # classifier weight row of the predicted answer, bias excluded
    conv_activations: np.ndarray  # (K, u, v)
    gradient_fn: Callable[[int], np.ndarray]

    def logit_gradient(self, answer: int | None = None) -> np.ndarray:
        return self.gradient_fn(self.predicted if answer is None else answer)


def pad_tokens(questions: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token id lists; returns (ids, mask) with mask 1 on real tokens."""
    max_len = max(len(q) for q in questions)
    ids = torch.zeros((len(questions), max_len), dtype=torch.long)
    mask = torch.zeros((len(questions), max_len), dtype=torch.float32)
    for i, q in enumerate(questions):
        ids[i, : len(q)] = torch.as_tensor(q, dtype=torch.long)
        mask[i, : len(q)] = 1.0
    return ids, mask


def _check_inputs(model: VqaNet, image: np.ndarray, tokens: list[int]) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"image must be (h, w, 3), got {image.shape}")
    if image.min() < -1e-6 or image.max() > 1 + 1e-6:
        raise InputError("image values must lie in [0, 1]")
    if len(tokens) == 0:
        raise InputError("question must contain at least one token")
    vocab_size = len(model.question_vocab)
    bad = [t for t in tokens if not (0 <= int(t) < vocab_size)]
    if bad:
        raise InputError(f"token ids {bad} outside question vocabulary (size {vocab_size})")


def _to_chw(image: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype).unsqueeze(0)


def vqa_forward(model: VqaNet, image: np.ndarray, tokens: list[int]) -> VqaOutput:
    """Run the model on one (image, question) pair and expose all introspection handles."""
    _check_inputs(model, image, tokens)
    dtype = next(model.parameters()).dtype
    model.eval()
    ids, mask = pad_tokens([list(tokens)])
    img = _to_chw(image, dtype)
    with torch.no_grad():
        q_bar = model.question_embedding(ids, mask)
        acts = model.image_activations(img, q_bar)
        logits = model.head(acts, q_bar)
        probs = torch.softmax(logits, dim=1)
    predicted = int(logits.argmax(dim=1).item())

    def gradient_fn(answer: int) -> np.ndarray:
        return logit_gradient(model, image, tokens, answer)

    return VqaOutput(
        logits=logits[0].numpy().copy(),
        predicted=predicted,
        probabilities=probs[0].numpy().copy(),
        q_bar=q_bar[0].numpy().copy(),
        a_bar=answer_embedding(model, predicted),
        conv_activations=acts[0].numpy().copy(),
        gradient_fn=gradient_fn,
    )


def answer_embedding(model: VqaNet, answer: int) -> np.ndarray:
    """Classifier weight row for `answer`, copied out (detached from training)."""
    if not 0 <= answer < len(model.answer_vocab):
        raise InputError(f"answer index {answer} out of range")
    return model.classifier.weight[answer].detach().numpy().copy()


def logit_gradient(model: VqaNet, image: np.ndarray, tokens: list[int], answer: int) -> np.ndarray:
    """d(logit_answer) / d(designated-layer activations), shape (K, u, v)."""
    _check_inputs(model, image, tokens)
    if not 0 <= answer < len(model.answer_vocab):
        raise InputError(f"answer index {answer} out of range")
    dtype = next(model.parameters()).dtype
    model.eval()
    ids, mask = pad_tokens([list(tokens)])
    img = _to_chw(image, dtype)
    with torch.no_grad():
        q_bar = model.question_embedding(ids, mask)
        acts = model.image_activations(img, q_bar)
    phi = acts.detach().requires_grad_(True)
    logits = model.head(phi, q_bar)
    (grad,) = torch.autograd.grad(logits[0, answer], phi)
    return grad[0].numpy().copy()


def vqa_checkpoint_meta(model: VqaNet) -> dict:
    return {
        "kind": "vqa",
        "config": {
            "question_vocab": model.question_vocab,
            "answer_vocab": model.answer_vocab,
            **dataclasses.asdict(model.config),
        },
    }


def save_vqa(model: VqaNet, path) -> None:
    save_checkpoint(path, model.state_dict(), vqa_checkpoint_meta(model))


def load_vqa(path) -> VqaNet:
    state, meta = load_checkpoint(path)
    cfg = dict(meta["config"])
    question_vocab = cfg.pop("question_vocab")
    answer_vocab = cfg.pop("answer_vocab")
    model = VqaNet(question_vocab, answer_vocab, VqaModelConfig(**cfg))
    model.load_state_dict(state)
    model.eval()
    return model
