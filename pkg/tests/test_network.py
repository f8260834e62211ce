import numpy as np
import pytest

from models.config_model import NetworkConfig
from models.unet import UNet, block_of, deep_supervision_weights, split_params
from utils.autodiff import Tape, softmax, value_and_grad
from utils.exceptions import ConfigValidationError, ShapeError
from utils.losses import attach_labels, deep_supervised_loss


@pytest.fixture
def net3():
    return UNet(NetworkConfig(depth=3, channels=2, num_classes=4))


@pytest.fixture
def net1(tiny_network_config):
    return UNet(tiny_network_config)


def test_parameter_layout(net3):
    shapes = net3.param_shapes
    assert shapes["enc0.conv_a.w"] == (2, 1, 3, 3)
    assert shapes["enc3.conv_b.w"] == (16, 16, 3, 3)
    assert shapes["up0.tconv.w"] == (16, 8, 2, 2)
    assert shapes["up0.conv_a.w"] == (8, 16, 3, 3)
    assert shapes["up2.conv_b.w"] == (2, 2, 3, 3)
    assert shapes["out.w"] == (4, 2, 1, 1)
    assert "up2.head.w" not in shapes
    assert {"up0.head.w", "up1.head.w"} <= set(shapes)
    assert net3.blocks == ["enc0", "enc1", "enc2", "enc3", "up0", "up1", "up2", "out"]


def test_forward_shapes_and_pyramid_order(net3, rng):
    params = net3.init_params(0)
    tape = Tape()
    variables = {k: tape.leaf(k, v) for k, v in params.items()}
    pyramid, final = net3.forward(tape, variables, rng.uniform(size=(2, 16, 16)))
    assert final.shape == (2, 4, 16, 16)
    assert [f.shape[2] for f in pyramid.features] == [4, 8, 16]
    assert [l.shape[1] for l in pyramid.logits] == [4, 4, 4]
    assert pyramid.factors((16, 16)) == [4, 2, 1]
    assert pyramid.logits[-1] is final


def test_forward_rejects_indivisible_extents(net3, rng):
    params = net3.init_params(0)
    with pytest.raises(ShapeError):
        net3.predict(params, rng.uniform(size=(1, 1, 12, 12)))


def test_init_is_seeded(net1):
    a, b, c = net1.init_params(5), net1.init_params(5), net1.init_params(6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc0.conv_a.w"], c["enc0.conv_a.w"])
    assert np.array_equal(a["enc0.conv_a.gamma"], np.ones(2))
    assert not a["out.b"].any()


def test_check_params_flags_missing_and_misshaped(net1):
    params = net1.init_params(0)
    net1.check_params(params)
    broken = dict(params)
    broken.pop("out.b")
    with pytest.raises(ShapeError):
        net1.check_params(broken)
    broken = dict(params, **{"out.b": np.zeros(3)})
    with pytest.raises(ShapeError):
        net1.check_params(broken)


def test_default_split_after_bottleneck(net3):
    part = split_params(net3, net3.init_params(0))
    assert {block_of(k) for k in part.theta} == {"enc0", "enc1", "enc2", "enc3"}
    assert {block_of(k) for k in part.omega} == {"up0", "up1", "up2", "out"}
    assert set(part.theta).isdisjoint(part.omega)
    assert set(part.merged()) == set(net3.param_shapes)
    assert all(np.array_equal(part.phi[k], part.omega[k]) for k in part.omega)


def test_split_by_name_and_index(net3):
    params = net3.init_params(0)
    by_name = split_params(net3, params, "up1")
    by_index = split_params(net3, params, 5)
    assert set(by_name.omega) == set(by_index.omega)
    assert {block_of(k) for k in by_name.omega} == {"up1", "up2", "out"}


def test_split_rejects_non_boundaries(net3):
    params = net3.init_params(0)
    for bad in ("up1.conv_a", 0, 8, "nowhere"):
        with pytest.raises(ShapeError):
            split_params(net3, params, bad)


def test_last_n_masks_follow_the_trunk(net3):
    part = split_params(net3, net3.init_params(0), finetune_mask="last-3")
    assert part.finetune_mask == frozenset({"out.w", "out.b", "up2.conv_b.w", "up2.conv_b.gamma",
                                            "up2.conv_b.beta", "up2.conv_a.w", "up2.conv_a.gamma",
                                            "up2.conv_a.beta"})
    omega = part.omega.keys()
    assert net3.resolve_mask("none", omega) == frozenset()
    assert net3.resolve_mask("all", omega) == frozenset(omega)


def test_up_n_masks_include_block_heads(net3):
    omega = split_params(net3, net3.init_params(0)).omega.keys()
    up2 = net3.resolve_mask("up-2", omega)
    assert {block_of(k) for k in up2} == {"up1", "up2", "out"}
    assert "up1.head.w" in up2


def test_invalid_masks(net3):
    omega = split_params(net3, net3.init_params(0)).omega.keys()
    for mask in ("last-0", "up-4", "first-2", "last-x"):
        with pytest.raises(ConfigValidationError):
            net3.resolve_mask(mask, omega)


def test_mask_reaching_into_encoder_is_a_shape_error(net3):
    part = split_params(net3, net3.init_params(0), "up2", finetune_mask="none")
    with pytest.raises(ShapeError):
        net3.resolve_mask("up-2", part.omega.keys())


def test_deep_supervision_weights():
    assert deep_supervision_weights(3) == [0.25, 0.5, 1.0]
    assert deep_supervision_weights(1) == [1.0]
    assert deep_supervision_weights(4) == [0.125, 0.25, 0.5, 1.0]


def test_gradients_reach_every_parameter(rng):
    net = UNet(NetworkConfig(depth=2, channels=2, num_classes=4))
    params = net.init_params(1)
    images = rng.uniform(size=(2, 1, 8, 8))
    labels = rng.integers(0, 4, size=(2, 8, 8))

    def loss_fn(tape, variables):
        pyramid, _ = net.forward(tape, variables, images)
        attach_labels(pyramid, labels, 4)
        return deep_supervised_loss(pyramid.logits, pyramid.labels)

    _, grads = value_and_grad(loss_fn, params)
    assert set(grads) == set(params)
    assert all(np.any(grads[k] != 0) for k in grads if k.endswith(".w"))


def test_zero_parameters_give_zero_logits_and_uniform_probabilities(net3, rng):
    params = {name: np.zeros(shape) for name, shape in net3.param_shapes.items()}
    images = rng.uniform(size=(2, 1, 16, 16))
    np.testing.assert_array_equal(net3.predict(params, images), np.zeros((2, 4, 16, 16)))

    tape = Tape()
    variables = {name: tape.constant(value) for name, value in params.items()}
    pyramid, final = net3.forward(tape, variables, images)
    for logits in pyramid.logits:
        assert np.all(logits.value == 0.0)
    np.testing.assert_allclose(softmax(final, axis=1).value, 0.25, rtol=0, atol=1e-15)
