"""Training pipelines: VQA pretraining and adversarial counterfactual training.

Both are seeded and deterministic for a fixed thread count. Counterfactual
training freezes the VQA model (verified by weight hash), alternates
discriminator/generator updates, and logs a per-step loss breakdown as JSONL.
Checkpoints land at epoch boundaries and carry enough state (optimizers, RNG)
to resume with an identical loss trajectory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .discriminator import DiscriminatorConfig, PatchDiscriminator, save_discriminator
from .generator import GeneratorConfig, GeneratorNet, composite_torch, save_generator
from .gradcam import grad_cam, to_attention_map
from .objectives import (
    LossWeights,
    TrainingDivergenceError,
    adversarial_losses,
    flip_loss,
    total_generator_loss,
    weighted_recon_loss,
)
from .synth_data import DatasetConfig, Sample
from .vqa_core import VqaModelConfig, VqaNet, pad_tokens, save_vqa


@dataclass
class VqaTrainConfig:
    seed: int = 0
    epochs: int = 25
    batch_size: int = 32
    lr: float = 1.5e-3
    lr_min: float = 1e-4  # cosine-annealed floor
    num_threads: int | None = None


@dataclass
class CfTrainConfig:
    seed: int = 0
    epochs: int = 8
    batch_size: int = 16
    lr_gen: float = 2e-4
    lr_disc: float = 2e-4
    weights: LossWeights = field(default_factory=LossWeights)
    attention_policy: str = "precompute"  # "precompute" | "per_epoch"
    checkpoint_every_epochs: int | None = None
    snapshot_samples: int = 8
    num_threads: int | None = None


def _set_threads(n: int | None) -> None:
    if n is not None:
        torch.set_num_threads(n)


def weight_hash(model: nn.Module) -> str:
    """sha256 over all parameter bytes, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def stack_samples(samples: list[Sample]) -> dict:
    """Dense tensors for a sample list: images, padded tokens, answers."""
    images = torch.as_tensor(
        np.stack([s.image.transpose(2, 0, 1) for s in samples]), dtype=torch.float32
    )
    tokens, mask = pad_tokens([s.question for s in samples])
    answers = torch.as_tensor([s.answer for s in samples], dtype=torch.long)
    return {"images": images, "tokens": tokens, "mask": mask, "answers": answers}


def evaluate_vqa(model: VqaNet, samples: list[Sample], batch_size: int = 128) -> dict:
    """Accuracy against ground-truth answers, overall and per question type."""
    model.eval()
    data = stack_samples(samples)
    predicted = predict_answers(model, data, batch_size)
    correct = predicted == data["answers"]
    result = {"accuracy": float(correct.float().mean())}
    qtypes = np.asarray([s.question_type for s in samples])
    for qtype in sorted(set(qtypes)):
        idx = torch.as_tensor(qtypes == qtype)
        result[f"accuracy_{qtype}"] = float(correct[idx].float().mean())
    return result


def predict_answers(model: VqaNet, data: dict, batch_size: int = 128) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for lo in range(0, len(data["images"]), batch_size):
            sl = slice(lo, lo + batch_size)
            logits = model(data["images"][sl], data["tokens"][sl], data["mask"][sl])
            outs.append(logits.argmax(dim=1))
    return torch.cat(outs)


def train_vqa(
    train_samples: list[Sample],
    val_samples: list[Sample],
    dataset_config: DatasetConfig,
    config: VqaTrainConfig | None = None,
    model_config: VqaModelConfig | None = None,
    out_dir: str | Path | None = None,
) -> tuple[VqaNet, dict]:
    """Supervised answer-classification training of the VQA model."""
    if not train_samples or not val_samples:
        raise ValueError("train and val splits must both be nonempty")
    config = config or VqaTrainConfig()
    _set_threads(config.num_threads)
    torch.manual_seed(config.seed)

    model = VqaNet(dataset_config.question_vocab(), dataset_config.answer_vocab(), model_config)
    data = stack_samples(train_samples)
    n = len(train_samples)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=config.epochs, eta_min=config.lr_min
    )
    shuffle_rng = torch.Generator().manual_seed(config.seed + 1)

    step_losses: list[float] = []
    epoch_log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(n, generator=shuffle_rng)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            logits = model(data["images"][idx], data["tokens"][idx], data["mask"][idx])
            loss = F.cross_entropy(logits, data["answers"][idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite VQA loss at epoch {epoch} step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step_losses.append(float(loss.detach()))
            epoch_loss += float(loss.detach())
            batches += 1
            step += 1
        scheduler.step()
        entry = {"epoch": epoch, "train_loss": epoch_loss / max(batches, 1)}
        entry.update({f"val_{k}": v for k, v in evaluate_vqa(model, val_samples).items()})
        epoch_log.append(entry)

    metrics = {
        "step_losses": step_losses,
        "epochs": epoch_log,
        "final": epoch_log[-1] if epoch_log else {},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_vqa(model, out / "vqa.pt")
        with open(out / "vqa_train_log.jsonl", "w") as fh:
            for entry in epoch_log:
                fh.write(json.dumps(entry) + "\n")
    model.eval()
    return model, metrics


# ---------------------------------------------------------------------------
# counterfactual training


def compute_attention_batch(
    model: VqaNet, data: dict, answers: torch.Tensor, h: int, w: int, chunk: int = 64
) -> torch.Tensor:
    """Attention maps for many samples at once (same math as gradcam.attention_for).

    The pooled-gradient trick batches cleanly: summing the selected logits
    gives each sample the gradient of its own logit.
    """
    maps = []
    model.eval()
    for lo in range(0, len(data["images"]), chunk):
        sl = slice(lo, lo + chunk)
        with torch.no_grad():
            q_bar = model.question_embedding(data["tokens"][sl], data["mask"][sl])
            acts = model.image_activations(data["images"][sl], q_bar)
        phi = acts.detach().requires_grad_(True)
        logits = model.head(phi, q_bar)
        selected = logits.gather(1, answers[sl].unsqueeze(1)).sum()
        (grads,) = torch.autograd.grad(selected, phi)
        for b in range(phi.shape[0]):
            sal = grad_cam(phi[b].detach().numpy(), grads[b].numpy())
            maps.append(to_attention_map(sal, h, w))
    return torch.as_tensor(np.stack(maps), dtype=torch.float32)


def _prepare_cf_inputs(model: VqaNet, samples: list[Sample], h: int, w: int) -> dict:
    """Predicted answers, language vectors and attention maps for generator training."""
    data = stack_samples(samples)
    predicted = predict_answers(model, data)
    with torch.no_grad():
        q_bar = model.question_embedding(data["tokens"], data["mask"])
        a_bar = model.classifier.weight[predicted].detach()
    data["predicted"] = predicted
    data["q_bar"] = q_bar
    data["language"] = torch.cat([q_bar, a_bar], dim=1)
    data["attention"] = compute_attention_batch(model, data, predicted, h, w)
    return data


def _save_snapshots(
    out: Path, step: int, images: torch.Tensor, i_prime: torch.Tensor, attention: torch.Tensor
) -> None:
    from .eval_metrics import background_bound_holds  # local import avoids a cycle

    arr_i = images.detach().numpy()
    arr_p = i_prime.detach().numpy()
    arr_m = attention.detach().numpy()
    for b in range(arr_i.shape[0]):
        if not background_bound_holds(arr_i[b].transpose(1, 2, 0), arr_p[b].transpose(1, 2, 0), arr_m[b]):
            raise TrainingDivergenceError(f"background-preservation bound violated at step {step}")
    np.savez_compressed(out / f"counterfactuals_step{step:06d}.npz", original=arr_i, counterfactual=arr_p, attention=arr_m)


def train_cf(
    train_samples: list[Sample],
    vqa_model: VqaNet,
    config: CfTrainConfig | None = None,
    generator_config: GeneratorConfig | None = None,
    discriminator_config: DiscriminatorConfig | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[GeneratorNet, PatchDiscriminator, list[dict]]:
    """Adversarial counterfactual training against a frozen VQA model."""
    if not train_samples:
        raise ValueError("training split must be nonempty")
    config = config or CfTrainConfig()
    _set_threads(config.num_threads)
    torch.manual_seed(config.seed)

    vqa_model.eval()
    for p in vqa_model.parameters():
        p.requires_grad_(False)
    frozen_hash = weight_hash(vqa_model)

    h, w = train_samples[0].image.shape[:2]
    fuse = vqa_model.config
    generator_config = generator_config or GeneratorConfig(lang_dim=fuse.q_dim + fuse.fuse_dim)
    gen = GeneratorNet(generator_config)
    disc = PatchDiscriminator(discriminator_config)
    g_opt = torch.optim.Adam(gen.parameters(), lr=config.lr_gen, betas=(0.5, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=config.lr_disc, betas=(0.5, 0.999))
    shuffle_rng = torch.Generator().manual_seed(config.seed + 1)

    start_epoch = 0
    step = 0
    flip_hits = 0
    flip_seen = 0
    if resume_from is not None:
        state = torch.load(resume_from, map_location="cpu", weights_only=False)
        gen.load_state_dict(state["gen"])
        disc.load_state_dict(state["disc"])
        g_opt.load_state_dict(state["g_opt"])
        d_opt.load_state_dict(state["d_opt"])
        torch.set_rng_state(state["torch_rng"])
        shuffle_rng.set_state(state["shuffle_rng"])
        start_epoch = state["epoch"]
        step = state["step"]
        flip_hits = state["flip_hits"]
        flip_seen = state["flip_seen"]

    data = _prepare_cf_inputs(vqa_model, train_samples, h, w)
    n = len(train_samples)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "cf_train_log.jsonl", "a") if out is not None else None

    logs: list[dict] = []
    try:
        for epoch in range(start_epoch, config.epochs):
            if config.attention_policy == "per_epoch" and epoch > start_epoch:
                data["attention"] = compute_attention_batch(
                    vqa_model, data, data["predicted"], h, w
                )
            gen.train()
            disc.train()
            perm = torch.randperm(n, generator=shuffle_rng)
            for lo in range(0, n, config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                images = data["images"][idx]
                attention = data["attention"][idx]
                language = data["language"][idx]
                answers = data["predicted"][idx]

                i_hat = gen(torch.cat([images, attention], dim=1), language)
                i_prime = composite_torch(i_hat, images, attention)

                d_real = disc(images)
                d_fake = disc(i_prime.detach())
                d_loss, _ = adversarial_losses(d_real, d_fake)
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()

                fake_logits = disc(i_prime)
                _, adv_g = adversarial_losses(d_real.detach(), fake_logits)
                q_bar_batch = data["q_bar"][idx]
                logits_prime = vqa_model.head(
                    vqa_model.image_activations(i_prime, q_bar_batch), q_bar_batch
                )
                flip = flip_loss(torch.softmax(logits_prime, dim=1), answers)
                recon = weighted_recon_loss(images, i_hat, attention)
                total = (
                    config.weights.lambda_rec * recon
                    + config.weights.lambda_adv * adv_g
                    + config.weights.lambda_flip * flip
                )
                g_opt.zero_grad()
                total.backward()
                g_opt.step()

                try:
                    breakdown = total_generator_loss(
                        float(recon.detach()), float(flip.detach()), float(adv_g.detach()),
                        config.weights,
                    )
                except TrainingDivergenceError as exc:
                    raise TrainingDivergenceError(f"{exc} (epoch {epoch}, step {step})") from exc
                if not torch.isfinite(d_loss):
                    raise TrainingDivergenceError(f"non-finite d_loss (epoch {epoch}, step {step})")

                with torch.no_grad():
                    flipped = (logits_prime.argmax(dim=1) != answers).sum()
                flip_hits += int(flipped)
                flip_seen += len(idx)
                entry = {
                    "step": step,
                    "d_loss": float(d_loss.detach()),
                    "g_loss": breakdown.total,
                    "recon": breakdown.recon,
                    "flip": breakdown.flip,
                    "adv_g": breakdown.adv_g,
                    "flip_rate_running": flip_hits / max(flip_seen, 1),
                }
                logs.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                step += 1

            last_epoch = epoch == config.epochs - 1
            cadence_hit = (
                config.checkpoint_every_epochs is not None
                and (epoch + 1) % config.checkpoint_every_epochs == 0
            )
            if out is not None and (cadence_hit or last_epoch):
                save_generator(gen, out / "generator.pt")
                save_discriminator(disc, out / "discriminator.pt")
                torch.save(
                    {
                        "gen": gen.state_dict(),
                        "disc": disc.state_dict(),
                        "g_opt": g_opt.state_dict(),
                        "d_opt": d_opt.state_dict(),
                        "torch_rng": torch.get_rng_state(),
                        "shuffle_rng": shuffle_rng.get_state(),
                        "epoch": epoch + 1,
                        "step": step,
                        "flip_hits": flip_hits,
                        "flip_seen": flip_seen,
                    },
                    out / "train_state.pt",
                )
                with torch.no_grad():
                    k = min(config.snapshot_samples, n)
                    snap_imgs = data["images"][:k]
                    snap_att = data["attention"][:k]
                    snap_hat = gen(torch.cat([snap_imgs, snap_att], dim=1), data["language"][:k])
                    snap_prime = composite_torch(snap_hat, snap_imgs, snap_att)
                _save_snapshots(out, step, snap_imgs, snap_prime, snap_att)
    finally:
        if log_fh is not None:
            log_fh.close()

    if weight_hash(vqa_model) != frozen_hash:
        raise TrainingDivergenceError("VQA weights changed during counterfactual training")
    gen.eval()
    disc.eval()
    return gen, disc, logs
