import json

import numpy as np
import pytest
import torch

from vqacf.generator import GeneratorConfig
from vqacf.objectives import TrainingDivergenceError
from vqacf.synth_data import DatasetConfig, generate_split
from vqacf.training import (
    CfTrainConfig,
    VqaTrainConfig,
    compute_attention_batch,
    evaluate_vqa,
    stack_samples,
    train_cf,
    train_vqa,
    weight_hash,
)
from vqacf.gradcam import attention_for


@pytest.fixture(scope="module")
def smoke_samples(dataset_config):
    return generate_split(dataset_config, 128, base_seed=61_000)


def test_vqa_smoke_loss_decreases_across_seeds(dataset_config, smoke_samples, tiny_val_samples):
    train = smoke_samples[:64]
    # 64 samples at batch 32 -> 2 steps/epoch; 25 epochs -> 50 steps
    wins = 0
    for seed in range(5):
        config = VqaTrainConfig(seed=seed, epochs=25, batch_size=32, num_threads=1)
        _, metrics = train_vqa(train, tiny_val_samples, dataset_config, config)
        losses = metrics["step_losses"]
        assert len(losses) == 50
        if losses[-1] < losses[0]:
            wins += 1
    assert wins / 5 >= 0.9


def test_vqa_determinism_fixed_seed(dataset_config, smoke_samples, tiny_val_samples):
    train = smoke_samples[:32]
    config = VqaTrainConfig(seed=3, epochs=2, batch_size=16, num_threads=1)
    model_a, _ = train_vqa(train, tiny_val_samples, dataset_config, config)
    model_b, _ = train_vqa(train, tiny_val_samples, dataset_config, config)
    assert weight_hash(model_a) == weight_hash(model_b)


def test_vqa_nonfinite_loss_aborts(dataset_config, smoke_samples, tiny_val_samples):
    import dataclasses

    poisoned = list(smoke_samples[:16])
    poisoned[0] = dataclasses.replace(poisoned[0], image=np.full_like(poisoned[0].image, np.nan))
    config = VqaTrainConfig(seed=0, epochs=1, batch_size=16, num_threads=1)
    with pytest.raises(TrainingDivergenceError):
        train_vqa(poisoned, tiny_val_samples, dataset_config, config)


def test_train_rejects_empty_split(dataset_config, tiny_val_samples):
    with pytest.raises(ValueError):
        train_vqa([], tiny_val_samples, dataset_config)


@pytest.fixture(scope="module")
def smoke_vqa(dataset_config, smoke_samples, tiny_val_samples):
    config = VqaTrainConfig(seed=0, epochs=3, batch_size=32, num_threads=1)
    model, _ = train_vqa(smoke_samples, tiny_val_samples, dataset_config, config)
    return model


def test_cf_smoke_recon_improves_and_vqa_frozen(dataset_config, smoke_samples, smoke_vqa, tmp_path):
    before = weight_hash(smoke_vqa)
    # 128 samples at batch 16 -> 8 steps/epoch; 25 epochs -> 200 steps
    config = CfTrainConfig(seed=0, epochs=25, batch_size=16, num_threads=1,
                           checkpoint_every_epochs=25)
    gen, disc, logs = train_cf(smoke_samples, smoke_vqa, config, out_dir=tmp_path)
    assert weight_hash(smoke_vqa) == before
    assert len(logs) == 200
    assert logs[-1]["recon"] < logs[1]["recon"]
    assert all(np.isfinite(entry["g_loss"]) for entry in logs)

    # per-step JSONL log mirrors the in-memory entries
    lines = [json.loads(line) for line in open(tmp_path / "cf_train_log.jsonl")]
    assert len(lines) == len(logs)
    assert set(lines[0]) == {"step", "d_loss", "g_loss", "recon", "flip", "adv_g", "flip_rate_running"}

    # persisted counterfactual snapshots respect the compositing bound
    snapshots = sorted(tmp_path.glob("counterfactuals_step*.npz"))
    assert snapshots
    data = np.load(snapshots[-1])
    diff = np.abs(data["counterfactual"] - data["original"])
    assert (diff <= data["attention"] + 1e-6).all()


def test_cf_resume_reproduces_loss_trajectory(dataset_config, smoke_vqa, smoke_samples, tmp_path):
    train = smoke_samples[:32]
    full_cfg = CfTrainConfig(seed=5, epochs=4, batch_size=16, num_threads=1,
                             checkpoint_every_epochs=2, snapshot_samples=2)
    _, _, full_logs = train_cf(train, smoke_vqa, full_cfg, out_dir=tmp_path / "full")

    half_cfg = CfTrainConfig(seed=5, epochs=2, batch_size=16, num_threads=1,
                             checkpoint_every_epochs=2, snapshot_samples=2)
    train_cf(train, smoke_vqa, half_cfg, out_dir=tmp_path / "half")
    resumed_cfg = CfTrainConfig(seed=5, epochs=4, batch_size=16, num_threads=1,
                                snapshot_samples=2)
    _, _, resumed_logs = train_cf(
        train, smoke_vqa, resumed_cfg, resume_from=tmp_path / "half" / "train_state.pt"
    )
    tail = full_logs[len(full_logs) - len(resumed_logs):]
    assert len(resumed_logs) == len(tail) > 0
    for a, b in zip(tail, resumed_logs):
        assert a["step"] == b["step"]
        assert np.isclose(a["g_loss"], b["g_loss"], atol=1e-6)
        assert np.isclose(a["d_loss"], b["d_loss"], atol=1e-6)


def test_batched_attention_matches_single_sample_path(dataset_config, smoke_vqa, smoke_samples):
    subset = smoke_samples[:6]
    data = stack_samples(subset)
    from vqacf.training import predict_answers

    predicted = predict_answers(smoke_vqa, data)
    h, w = subset[0].image.shape[:2]
    batched = compute_attention_batch(smoke_vqa, data, predicted, h, w)
    for i, sample in enumerate(subset):
        single = attention_for(smoke_vqa, sample.image, sample.question)
        assert np.allclose(batched[i].numpy(), single, atol=1e-5)


def test_evaluate_vqa_reports_per_type(dataset_config, smoke_vqa, tiny_val_samples):
    result = evaluate_vqa(smoke_vqa, tiny_val_samples)
    assert {"accuracy", "accuracy_color", "accuracy_shape"} <= set(result)
    assert 0.0 <= result["accuracy"] <= 1.0


def test_cf_custom_generator_config(dataset_config, smoke_vqa, smoke_samples):
    config = CfTrainConfig(seed=0, epochs=1, batch_size=16, num_threads=1)
    gen, _, _ = train_cf(
        smoke_samples[:16], smoke_vqa, config,
        generator_config=GeneratorConfig(base_channels=16, depth=3, lang_dim=128),
    )
    assert gen.config.base_channels == 16
