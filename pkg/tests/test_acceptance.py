"""Acceptance suite: runs every exit criterion at its stated tolerance and
prints one PASS/FAIL line per criterion.

The desk-scale runs (dataset 2000/500 at 64x64, VQA training, counterfactual
training) execute once as session fixtures and are shared by the criteria
that need them.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import (
    finite_difference_logit_gradient,
    relative_gradient_error,
    small_fixture_net,
)
from vqacf.cli import main
from vqacf.discriminator import spectral_normalize
from vqacf.eval_metrics import (
    GRID_COLUMNS,
    build_metrics_report,
    generate_records,
    render_report_text,
    semantic_change_rate,
    validate_background,
)
from vqacf.generator import composite
from vqacf.gradcam import gaussian_blur, gaussian_kernel_1d, grad_cam, to_attention_map
from vqacf.objectives import adversarial_losses, flip_loss, weighted_recon_loss
from vqacf.synth_data import (
    DatasetConfig,
    generate_dataset,
    generate_split,
    lookup_answer,
    save_dataset,
    _unique_referents,
)
from vqacf.training import CfTrainConfig, VqaTrainConfig, train_cf, train_vqa, weight_hash
from vqacf.vqa_core import logit_gradient, save_vqa

VQA_BUDGET_S = 15 * 60
COIN_BUDGET_S = 30 * 60
DESK_THREADS = 2  # determinism holds for a fixed thread count


def _report(name: str, ok: bool, detail: str = "") -> None:
    print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# desk-scale artifacts, built once


@pytest.fixture(scope="session")
def desk_config():
    return DatasetConfig()  # 2000 train / 500 val at 64x64


@pytest.fixture(scope="session")
def desk_data(desk_config):
    return generate_dataset(desk_config)


@pytest.fixture(scope="session")
def desk_vqa(desk_config, desk_data):
    start = time.monotonic()
    model, metrics = train_vqa(
        desk_data["train"], desk_data["val"], desk_config,
        VqaTrainConfig(seed=0, num_threads=DESK_THREADS),
    )
    duration = time.monotonic() - start
    return {"model": model, "metrics": metrics, "duration": duration}


@pytest.fixture(scope="session")
def desk_cf(desk_config, desk_data, desk_vqa, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_cf")
    start = time.monotonic()
    gen, disc, logs = train_cf(
        desk_data["train"], desk_vqa["model"],
        CfTrainConfig(seed=0, num_threads=DESK_THREADS),
        out_dir=out,
    )
    duration = time.monotonic() - start
    return {"gen": gen, "disc": disc, "logs": logs, "duration": duration, "out": out}


@pytest.fixture(scope="session")
def desk_records(desk_config, desk_data, desk_vqa, desk_cf):
    records = generate_records(desk_data["val"], desk_vqa["model"], desk_cf["gen"], "val")
    records += generate_records(desk_data["train"], desk_vqa["model"], desk_cf["gen"], "train")
    return records


# --------------------------------------------------------------------------
# criteria


def test_gradcam_oracle():
    start = time.monotonic()
    for seed in (3, 11, 42):
        net, image, tokens = small_fixture_net(seed=seed)
        answer = seed % len(net.answer_vocab)
        grad = logit_gradient(net, image, tokens, answer)
        fd = finite_difference_logit_gradient(net, image, tokens, answer)
        err = relative_gradient_error(grad, fd)
        assert err <= 1e-3, f"fixture seed {seed}: rel err {err}"
        # the verified gradients drive the saliency map without error
        acts = np.abs(np.random.default_rng(seed).normal(size=grad.shape))
        saliency = grad_cam(acts, grad)
        assert (saliency >= 0).all()

    activations = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    gradients = np.full((1, 2, 2), 0.5)
    exact = np.array_equal(grad_cam(activations, gradients), [[0.5, 1.0], [1.5, 2.0]])
    duration = time.monotonic() - start
    _report("gradcam-oracle", exact and duration < 60, f"{duration:.1f}s")


def test_spectral_normalization_oracle():
    start = time.monotonic()
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for k in range(100):
        if k % 3 == 0:
            shape = (8, 8)
        elif k % 3 == 1:
            shape = (6, 3, 4, 4)
        else:
            shape = (16, 8, 3, 3)
        w = torch.randn(*shape, generator=g, dtype=torch.float64) * float(
            torch.rand(1, generator=g) * 4 + 0.25
        )
        u = torch.randn(shape[0], generator=g, dtype=torch.float64)
        u = u / u.norm()
        # enough refinement for kernels with a narrow spectral gap
        w_hat, _ = spectral_normalize(w, u, n_iterations=500)
        sigma = float(torch.linalg.svdvals(w_hat.reshape(shape[0], -1))[0])
        worst = max(worst, abs(sigma - 1.0))
    duration = time.monotonic() - start
    _report("spectral-normalization-oracle", worst <= 1e-3 and duration < 60,
            f"worst |sigma-1| {worst:.2e}, {duration:.1f}s")


def test_compositing_invariants():
    start = time.monotonic()
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(1000):
        image = rng.uniform(0, 1, (16, 16, 3))
        generated = rng.uniform(0, 1, (16, 16, 3))
        attention = rng.uniform(0, 1, (1, 16, 16))
        ok &= np.array_equal(composite(generated, image, np.zeros_like(attention)), image)
        ok &= np.array_equal(composite(generated, image, np.ones_like(attention)), generated)
        result = composite(generated, image, attention)
        ok &= bool((np.abs(result - image) <= attention[0][..., None] + 1e-12).all())
        ok &= bool(result.min() >= 0.0 and result.max() <= 1.0)
    duration = time.monotonic() - start
    _report("compositing-invariants", ok and duration < 60, f"{duration:.1f}s")


def test_loss_unit_suite():
    start = time.monotonic()
    image = torch.rand(3, 8, 8, dtype=torch.float64)
    ok = float(weighted_recon_loss(image, image, torch.rand(1, 8, 8))) == 0.0
    ok &= float(weighted_recon_loss(image, torch.rand(3, 8, 8), torch.ones(1, 8, 8))) == 0.0
    ok &= abs(float(weighted_recon_loss(
        torch.zeros(3, 8, 8), torch.full((3, 8, 8), 0.1, dtype=torch.float64),
        torch.zeros(1, 8, 8))) - 0.01) < 1e-12

    uniform = torch.full((10,), 0.1, dtype=torch.float64)
    ok &= abs(float(flip_loss(uniform, 0)) - (-2.302585)) < 1e-6

    zeros = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    d_loss, _ = adversarial_losses(zeros, zeros)
    ok &= abs(float(d_loss) - math.log(2.0)) < 1e-6

    # gradient oracle on the composite generator objective
    generated = torch.rand(3, 6, 6, dtype=torch.float64, requires_grad=True)
    attention = torch.rand(1, 6, 6, dtype=torch.float64)
    target = torch.rand(3, 6, 6, dtype=torch.float64)
    logits = torch.randn(5, dtype=torch.float64, requires_grad=True)
    loss = weighted_recon_loss(target, generated, attention) + flip_loss(
        torch.softmax(logits, 0), 1
    )
    grads = torch.autograd.grad(loss, (generated, logits))
    step = 1e-6
    worst = 0.0
    for tensor, grad, rebuild in (
        (generated, grads[0], lambda t: weighted_recon_loss(target, t, attention)),
        (logits, grads[1], lambda t: flip_loss(torch.softmax(t, 0), 1)),
    ):
        flat = tensor.detach().clone()
        view = flat.reshape(-1)
        for idx in range(0, view.numel(), max(1, view.numel() // 12)):
            orig = float(view[idx])
            view[idx] = orig + step
            up = float(rebuild(flat))
            view[idx] = orig - step
            down = float(rebuild(flat))
            view[idx] = orig
            fd = (up - down) / (2 * step)
            ref = float(grad.reshape(-1)[idx])
            worst = max(worst, abs(fd - ref) / max(abs(fd), 1e-6))
    ok &= worst <= 1e-3
    duration = time.monotonic() - start
    _report("loss-unit-suite", bool(ok) and duration < 120,
            f"worst grad rel err {worst:.2e}, {duration:.1f}s")


def test_gaussian_smoothing_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(13)
    values = rng.uniform(0, 4, (48, 40))
    k1 = gaussian_kernel_1d(2.0)
    kernel = np.outer(k1, k1)
    radius = len(k1) // 2
    padded = np.pad(values, radius, mode="reflect")
    direct = np.zeros_like(values)
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            direct[i, j] = (padded[i: i + 2 * radius + 1, j: j + 2 * radius + 1] * kernel).sum()
    max_err = float(np.abs(gaussian_blur(values) - direct).max())

    constant_map = to_attention_map(np.full((8, 8), 0.37), 64, 64)
    all_ones = np.allclose(constant_map, 1.0, atol=1e-6)
    duration = time.monotonic() - start
    _report("gaussian-smoothing-oracle", max_err < 1e-6 and all_ones,
            f"max err {max_err:.2e}, {duration:.1f}s")


def test_dataset_soundness_sweep(desk_config):
    start = time.monotonic()
    samples = generate_split(desk_config, 10_000, base_seed=4_000_000)
    bad = 0
    for s in samples:
        if s.answer != lookup_answer(s.scene, s.question_type, s.target_object, desk_config):
            bad += 1
            continue
        if s.target_object not in _unique_referents(s.scene, s.question_type):
            bad += 1
            continue
        if not s.masks[s.target_object].any():
            bad += 1
    duration = time.monotonic() - start
    _report("dataset-soundness-sweep", bad == 0 and duration < 120,
            f"{len(samples)} samples, {bad} bad, {duration:.1f}s")


def test_desk_vqa_run(desk_config, desk_data, desk_vqa):
    final = desk_vqa["metrics"]["final"]
    color_acc = final["val_accuracy_color"]
    duration = desk_vqa["duration"]

    # determinism of the training procedure under a fixed seed/thread count,
    # demonstrated with a short replay (the mechanism does not depend on epochs)
    replay_cfg = VqaTrainConfig(seed=0, epochs=3, num_threads=DESK_THREADS)
    subset = desk_data["train"][:512]
    model_a, _ = train_vqa(subset, desk_data["val"], desk_config, replay_cfg)
    model_b, _ = train_vqa(subset, desk_data["val"], desk_config, replay_cfg)
    deterministic = weight_hash(model_a) == weight_hash(model_b)

    _report(
        "desk-vqa-run",
        color_acc >= 0.90 and duration <= VQA_BUDGET_S and deterministic,
        f"color acc {color_acc:.3f}, {duration:.0f}s, deterministic={deterministic}",
    )


def test_desk_coin_run(desk_records, desk_cf):
    duration = desk_cf["duration"]
    val_records = [r for r in desk_records if r.split == "val"]
    rates = semantic_change_rate(val_records)
    flip_color = rates["color"]

    background_ok = all(validate_background(r) for r in desk_records)

    report = build_metrics_report(desk_records)
    grid_complete = all(
        set(report.l1_grid[split][stat]) == set(GRID_COLUMNS)
        for split in ("train", "val")
        for stat in ("mu", "sigma")
    )
    text = render_report_text(report)
    reference_rendered = "reference" in text and "0.0175" in text

    _report(
        "desk-coin-run",
        (flip_color > 0 and flip_color >= 0.15 and duration <= COIN_BUDGET_S
         and background_ok and grid_complete and reference_rendered),
        f"flip(color) {flip_color:.3f}, flip(all) {rates['all']:.3f}, "
        f"{duration:.0f}s, background_ok={background_ok}",
    )


def test_attention_hits_target_object(desk_records):
    # soft expectation, reported not gated: attention peak inside the target
    # object's mask for most held-out single-object scenes
    val_records = [r for r in desk_records if r.split == "val"]
    hits = [bool(r.target_mask[np.unravel_index(int(r.attention[0].argmax()), r.attention[0].shape)])
            for r in val_records]
    print(f"REPORT: attention-hit-rate {np.mean(hits):.3f} over {len(hits)} val records")


def test_explain_end_to_end(desk_config, desk_data, desk_vqa, desk_cf, tmp_path, capsys):
    image_dir = tmp_path / "dataset"
    save_dataset({"val": desk_data["val"][:3]}, image_dir, desk_config)
    vqa_path = tmp_path / "vqa.pt"
    save_vqa(desk_vqa["model"], vqa_path)
    sample = desk_data["val"][0]
    image_path = image_dir / "val" / "images" / f"{sample.sample_id}.png"

    code = main([
        "explain",
        "--image", str(image_path),
        "--question", sample.question_text,
        "--vqa-checkpoint", str(vqa_path),
        "--gen-checkpoint", str(desk_cf["out"] / "generator.pt"),
        "--out", str(tmp_path / "out"),
    ])
    captured = capsys.readouterr()
    answers = [line.split(": ", 1)[1] for line in captured.out.splitlines()
               if line.startswith(("answer:", "counterfactual answer:"))]
    vocab = desk_vqa["model"].answer_vocab
    panels = list((tmp_path / "out").glob("*_panel.png"))
    ok = (code == 0 and len(panels) == 1 and len(answers) == 2
          and all(a in vocab for a in answers))
    _report("explain-end-to-end", ok, f"answers {answers}")
