import numpy as np
import pytest

from agents.meta_test_agent import MetaTestAgent, meta_test_finetune
from models.config_model import FinetuneConfig, NetworkConfig
from models.unet import UNet, split_params


@pytest.fixture
def setup(tiny_network_config, rng):
    network = UNet(tiny_network_config)
    part = split_params(network, network.init_params(0), finetune_mask="none")
    images = rng.uniform(size=(3, 16, 16))
    labels = rng.integers(0, 4, size=(3, 16, 16))
    return network, part, (images, labels)


def test_zero_shots_or_steps_return_the_initialization(setup):
    network, part, support = setup
    for shots, steps, mask in ((0, 5, "all"), (1, 0, "all"), (1, 5, "none")):
        head = meta_test_finetune(network, part.theta, part.phi, support, shots, steps, mask)
        assert all(np.array_equal(head[k], part.phi[k]) for k in part.phi)
        assert all(head[k] is not part.phi[k] for k in part.phi)


def test_only_masked_parameters_move(setup):
    network, part, support = setup
    theta_before = {k: v.copy() for k, v in part.theta.items()}
    head = meta_test_finetune(network, part.theta, part.phi, support, shots=2, steps=3, finetune_mask="last-1")
    assert not np.array_equal(head["out.w"], part.phi["out.w"])
    for k in part.phi:
        if not k.startswith("out."):
            assert np.array_equal(head[k], part.phi[k])
    assert all(np.array_equal(part.theta[k], theta_before[k]) for k in theta_before)


def test_support_size_is_checked(setup):
    network, part, (images, labels) = setup
    with pytest.raises(ValueError):
        meta_test_finetune(network, part.theta, part.phi, (images, labels), shots=4, steps=1)
    with pytest.raises(ValueError):
        meta_test_finetune(network, part.theta, part.phi, (images[:0], labels[:0]), shots=1, steps=1)


def test_agent_uses_the_configured_mask(setup):
    network, part, support = setup
    agent = MetaTestAgent(network, FinetuneConfig(steps=2, mask="all", lr=0.05))
    head = agent.adapt(part.theta, part.phi, support, shots=1)
    assert not np.array_equal(head["up0.conv_a.w"], part.phi["up0.conv_a.w"])
    frozen = agent.adapt(part.theta, part.phi, support, shots=1, mask="none")
    assert all(np.array_equal(frozen[k], part.phi[k]) for k in part.phi)


def test_last_three_mask_freezes_encoder_and_remaining_head(rng):
    network = UNet(NetworkConfig(depth=2, channels=2, num_classes=4))
    part = split_params(network, network.init_params(0), finetune_mask="last-3")
    theta_before = {k: v.copy() for k, v in part.theta.items()}
    support = (rng.uniform(size=(1, 8, 8)), rng.integers(0, 4, size=(1, 8, 8)))
    head = meta_test_finetune(network, part.theta, part.phi, support, shots=1, steps=2, finetune_mask="last-3")
    for k in part.phi:
        if k not in part.finetune_mask:
            assert np.array_equal(head[k], part.phi[k])
    assert any(not np.array_equal(head[k], part.phi[k]) for k in part.finetune_mask)
    assert all(np.array_equal(part.theta[k], theta_before[k]) for k in theta_before)
