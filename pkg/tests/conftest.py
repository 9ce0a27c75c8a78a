import numpy as np
import pytest
import torch

from vqacf.synth_data import DatasetConfig, generate_split
from vqacf.vqa_core import VqaModelConfig, VqaNet


@pytest.fixture(scope="session")
def dataset_config():
    return DatasetConfig()


@pytest.fixture(scope="session")
def tiny_samples(dataset_config):
    return generate_split(dataset_config, 64, base_seed=50_000)


@pytest.fixture(scope="session")
def tiny_val_samples(dataset_config):
    return generate_split(dataset_config, 24, base_seed=77_000)


@pytest.fixture()
def fresh_model(dataset_config):
    torch.manual_seed(11)
    model = VqaNet(dataset_config.question_vocab(), dataset_config.answer_vocab())
    model.eval()
    return model


def small_fixture_net(seed: int, image_hw: int = 32) -> tuple[VqaNet, np.ndarray, list[int]]:
    """Tiny double-precision network plus a matching random input pair."""
    torch.manual_seed(seed)
    question_vocab = [f"w{i}" for i in range(6)]
    answer_vocab = [f"a{i}" for i in range(4)]
    net = VqaNet(question_vocab, answer_vocab, VqaModelConfig(q_dim=8, cam_channels=4, fuse_dim=6))
    net.double().eval()
    with torch.no_grad():
        # scale the head so logit gradients are macroscopic
        net.classifier.weight *= 10.0
        net.img_proj.weight *= 10.0
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 1.0, size=(image_hw, image_hw, 3))
    tokens = [0, 3, 5]
    return net, image, tokens


def finite_difference_logit_gradient(
    net: VqaNet, image: np.ndarray, tokens: list[int], answer: int, step: float = 1e-4
) -> np.ndarray:
    """Central finite differences of the chosen logit through the model head."""
    from vqacf.vqa_core import pad_tokens

    ids, mask = pad_tokens([tokens])
    img = torch.as_tensor(image.transpose(2, 0, 1), dtype=torch.float64).unsqueeze(0)
    with torch.no_grad():
        q_bar = net.question_embedding(ids, mask)
        phi = net.image_activations(img, q_bar)

    def logit_of(acts: torch.Tensor) -> float:
        with torch.no_grad():
            return float(net.head(acts, q_bar)[0, answer])

    grad = np.zeros_like(phi[0].numpy())
    flat = phi.clone()
    for k in range(phi.shape[1]):
        for i in range(phi.shape[2]):
            for j in range(phi.shape[3]):
                orig = float(flat[0, k, i, j])
                flat[0, k, i, j] = orig + step
                up = logit_of(flat)
                flat[0, k, i, j] = orig - step
                down = logit_of(flat)
                flat[0, k, i, j] = orig
                grad[k, i, j] = (up - down) / (2.0 * step)
    return grad


def relative_gradient_error(
    estimate: np.ndarray, reference: np.ndarray, magnitude_floor: float = 1e-2
) -> float:
    """Max relative error on entries whose reference magnitude clears the floor."""
    mask = np.abs(reference) >= magnitude_floor
    if not mask.any():
        raise AssertionError("no reference entries above the magnitude floor")
    return float(np.max(np.abs(estimate[mask] - reference[mask]) / np.abs(reference[mask])))
