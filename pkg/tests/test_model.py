import numpy as np
import pytest

from autograd import Tape, Tensor, backward, no_grad, slice_channels, softmax_cross_entropy
from exceptions import ConfigError, DataError, ShapeError
from models import (
    DeepLabV2Head,
    FusionBlock,
    ModelConfig,
    PyramidHead,
    SegNet,
    build_backbone,
    init_depth_stem_from_rgb,
    parameter_digest,
    parameter_group,
)

from conftest import TOY_CLASSES


def _inputs(rng, size=32, batch=1):
    rgb = rng.normal(size=(batch, 3, size, size)).astype(np.float32)
    depth = rng.uniform(0.0, 1.0, size=(batch, 1, size, size)).astype(np.float32)
    return rgb, depth


def test_depth_stem_is_channel_mean():
    weights = np.zeros((64, 3, 3, 3), dtype=np.float32)
    weights[5, :, 1, 2] = [0.3, 0.6, 0.9]
    stem = init_depth_stem_from_rgb(weights)
    assert stem.shape == (64, 1, 3, 3)
    assert stem.data[5, 0, 1, 2] == pytest.approx(0.6)
    assert np.count_nonzero(stem.data) == 1


def test_depth_stem_of_zeros_is_zero():
    stem = init_depth_stem_from_rgb(np.zeros((8, 3, 3, 3)))
    assert not stem.data.any()


def test_depth_stem_rejects_non_rgb_filters():
    with pytest.raises(ShapeError):
        init_depth_stem_from_rgb(np.zeros((8, 1, 3, 3)))


def test_depth_branch_copies_rgb_weights(tiny_config):
    model = SegNet(tiny_config)
    rgb_state = model.rgb.state_dict()
    for path, tensor in model.depth.state_dict().items():
        if path == "stem.0.conv.weight":
            np.testing.assert_allclose(tensor.data, rgb_state[path].data.mean(axis=1, keepdims=True), rtol=1e-6)
        else:
            np.testing.assert_array_equal(tensor.data, rgb_state[path].data)


@pytest.mark.parametrize("output_stride,extent", [(8, 12), (16, 6), (32, 3)])
def test_backbone_top_extent(rng, output_stride, extent):
    config = ModelConfig.toy(output_stride=output_stride, block_depths=(1, 1, 1, 1), width_multiplier=1 / 16)
    backbone = build_backbone(config, 3, rng)
    assert backbone.output_shape((1, 3, 96, 96)) == (1, config.top_channels, extent, extent)


def test_backbone_forward_matches_traced_shape(rng, tiny_config):
    backbone = build_backbone(tiny_config, 3, rng)
    x, _ = _inputs(rng, size=96)
    with no_grad():
        top = backbone(Tensor(x))
    assert top.shape == (1, tiny_config.top_channels, 12, 12)


def test_backbone_rejects_other_channel_counts(rng, tiny_config):
    with pytest.raises(ShapeError):
        build_backbone(tiny_config, 4, rng)


def test_full_scale_widths():
    config = ModelConfig.full_scale()
    assert config.top_channels == 2048
    assert config.fusion_channels == 512
    assert config.block_depths == (3, 4, 23, 3)


def test_full_width_network_at_720():
    model = SegNet(ModelConfig.full_scale(num_classes=19))
    traced = model.trace_shapes(720, 720)
    assert traced["rgb"] == (1, 2048, 90, 90)
    assert traced["depth"] == (1, 2048, 90, 90)
    assert traced["fused"] == (1, 1024, 90, 90)
    assert traced["logits"] == (1, 19, 720, 720)


def test_invalid_output_stride():
    with pytest.raises(ConfigError):
        ModelConfig.toy(output_stride=4)


def test_no_branch_is_invalid():
    with pytest.raises(ConfigError):
        ModelConfig.toy(rgb_branch=False, depth_branch=False)


def test_parameter_shapes_do_not_depend_on_output_stride():
    shapes = []
    for output_stride in (8, 16, 32):
        config = ModelConfig.toy(output_stride=output_stride, block_depths=(1, 1, 1, 1), width_multiplier=1 / 16)
        shapes.append({path: t.shape for path, t in SegNet(config).state_dict().items()})
    assert shapes[0] == shapes[1] == shapes[2]


def test_concat_fusion_shape(rng):
    block = FusionBlock(16, 4, "concat", rng)
    with no_grad():
        fused = block(Tensor(rng.normal(size=(2, 16, 5, 5))), Tensor(rng.normal(size=(2, 16, 5, 5))))
    assert fused.shape == (2, 8, 5, 5)


def test_sum_fusion_shape(rng):
    block = FusionBlock(16, 4, "sum", rng)
    with no_grad():
        fused = block(Tensor(rng.normal(size=(1, 16, 3, 3))), Tensor(rng.normal(size=(1, 16, 3, 3))))
    assert fused.shape == (1, 4, 3, 3)


def test_sum_fusion_with_zero_depth_reduces_to_rgb(rng):
    block = FusionBlock(2, 2, "sum", rng).eval()
    block.rgb_reduce.conv.weight.data = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
    rgb = np.abs(rng.normal(size=(1, 2, 3, 3))).astype(np.float32)
    with no_grad():
        fused = block(Tensor(rgb), Tensor(np.zeros_like(rgb)))
    np.testing.assert_allclose(fused.data, rgb / np.sqrt(1.0 + 1e-5), rtol=1e-5)


def test_concat_halves_recover_each_branch(rng):
    block = FusionBlock(8, 3, "concat", rng).eval()
    rgb = Tensor(rng.normal(size=(1, 8, 4, 4)))
    depth = Tensor(rng.normal(size=(1, 8, 4, 4)))
    with no_grad():
        fused = block(rgb, depth)
        np.testing.assert_array_equal(slice_channels(fused, 0, 3).data, block.rgb_reduce(rgb).data)
        np.testing.assert_array_equal(slice_channels(fused, 3, 6).data, block.depth_reduce(depth).data)


def test_fusion_rejects_mismatched_maps(rng):
    block = FusionBlock(8, 3, "sum", rng)
    with pytest.raises(ShapeError):
        block(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 4, 5))))


def test_pyramid_head_upsamples_to_input(rng):
    head = PyramidHead(16, 4, TOY_CLASSES, (1, 2, 4, 8, 16), True, rng)
    with no_grad():
        logits = head(Tensor(rng.normal(size=(1, 16, 12, 12))), 96, 96)
    assert logits.shape == (1, TOY_CLASSES, 96, 96)
    assert len(head.branches) == 5
    assert head.has_gap


def test_deeplab_v2_preset():
    config = ModelConfig.toy(
        num_classes=TOY_CLASSES, block_depths=(1, 1, 1, 1), width_multiplier=1 / 16,
        depth_branch=False, pyramid_preset="deeplab-v2",
    )
    model = SegNet(config)
    assert isinstance(model.head, DeepLabV2Head)
    assert model.head.rates == (6, 12, 18, 24)
    assert len(model.head.branches) == 4
    assert not model.head.has_gap
    assert model.fusion is None
    assert model.trace_shapes(32, 32)["logits"] == (1, TOY_CLASSES, 32, 32)


def test_replace_preset_rederives_rates():
    config = ModelConfig.toy().replace(pyramid_preset="deeplab-v2")
    assert config.pyramid_rates == (6, 12, 18, 24)
    assert config.pyramid_gap is False


@pytest.mark.parametrize("rgb_branch,depth_branch", [(True, True), (True, False), (False, True)])
def test_logits_match_input_extent(rng, tiny_config, rgb_branch, depth_branch):
    model = SegNet(tiny_config.replace(rgb_branch=rgb_branch, depth_branch=depth_branch))
    rgb, depth = _inputs(rng)
    with no_grad():
        logits = model(rgb if rgb_branch else None, depth if depth_branch else None)
    assert logits.shape == (1, TOY_CLASSES, 32, 32)


def test_indivisible_input_is_padded_and_cropped(rng, tiny_config):
    model = SegNet(tiny_config)
    rgb = rng.normal(size=(1, 3, 30, 27)).astype(np.float32)
    depth = rng.uniform(size=(1, 1, 30, 27)).astype(np.float32)
    with no_grad():
        logits = model(rgb, depth)
    assert logits.shape == (1, TOY_CLASSES, 30, 27)
    assert model.trace_shapes(30, 27)["fused"][2:] == (4, 4)


def test_missing_depth_is_a_data_error(rng, tiny_config):
    rgb, _ = _inputs(rng)
    with pytest.raises(DataError, match="depth"):
        SegNet(tiny_config)(rgb, None)


def test_input_for_an_absent_branch_is_a_data_error(rng, tiny_config):
    rgb, depth = _inputs(rng)
    with pytest.raises(DataError, match="no depth branch"):
        SegNet(tiny_config.replace(depth_branch=False))(rgb, depth)
    with pytest.raises(DataError, match="no RGB branch"):
        SegNet(tiny_config.replace(rgb_branch=False))(rgb, depth)


def test_mismatched_modalities_are_rejected(rng, tiny_config):
    rgb, _ = _inputs(rng, size=32)
    _, depth = _inputs(rng, size=16)
    with pytest.raises(ShapeError):
        SegNet(tiny_config)(rgb, depth)


def test_frozen_forward_is_bitwise_repeatable(rng, tiny_config):
    model = SegNet(tiny_config).eval()
    rgb, depth = _inputs(rng)
    with no_grad():
        first = model(rgb, depth).data.copy()
        second = model(rgb, depth).data
    np.testing.assert_array_equal(first, second)


def test_frozen_forward_leaves_buffers_alone(rng, tiny_config):
    model = SegNet(tiny_config).eval()
    before = parameter_digest(model)
    rgb, depth = _inputs(rng)
    with no_grad():
        model(rgb, depth)
    assert parameter_digest(model) == before


def test_same_seed_same_weights(tiny_config):
    assert parameter_digest(SegNet(tiny_config, seed=3)) == parameter_digest(SegNet(tiny_config, seed=3))
    assert parameter_digest(SegNet(tiny_config, seed=3)) != parameter_digest(SegNet(tiny_config, seed=4))


def test_predict_is_argmax(rng, tiny_config):
    model = SegNet(tiny_config).eval()
    rgb, depth = _inputs(rng, batch=2)
    with no_grad():
        prediction = model.predict(rgb, depth)
        logits = model(rgb, depth).data
    assert prediction.shape == (2, 32, 32)
    np.testing.assert_array_equal(prediction, logits.argmax(axis=1))


def test_every_parameter_receives_gradient(rng, tiny_config):
    model = SegNet(tiny_config)
    rgb, depth = _inputs(rng)
    labels = rng.integers(0, TOY_CLASSES, size=(1, 32, 32))
    with Tape.scope():
        loss = softmax_cross_entropy(model(rgb, depth), labels)
        backward(loss)
    for path, param in model.named_parameters():
        assert param.grad is not None, path
        assert np.any(param.grad != 0), path


def test_set_frozen_stops_gradients_and_pins_batch_norm(rng, tiny_config):
    model = SegNet(tiny_config)
    model.set_frozen("rgb")
    assert all(not p.requires_grad for _, p in model.rgb.named_parameters())
    assert all(p.requires_grad for _, p in model.depth.named_parameters())
    assert model.rgb.stem[0].bn.mode == "frozen"
    assert model.depth.stem[0].bn.mode == "train"

    rgb, depth = _inputs(rng)
    labels = rng.integers(0, TOY_CLASSES, size=(1, 32, 32))
    with Tape.scope():
        backward(softmax_cross_entropy(model(rgb, depth), labels))
    assert all(p.grad is None for _, p in model.rgb.named_parameters())

    model.set_frozen("rgb", frozen=False)
    assert model.rgb.stem[0].bn.mode == "train"


def test_set_frozen_on_absent_group_is_a_no_op(tiny_config):
    model = SegNet(tiny_config.replace(depth_branch=False))
    model.set_frozen("depth")
    model.set_frozen("fusion")


def test_parameter_groups(tiny_config):
    groups = {parameter_group(path) for path, _ in SegNet(tiny_config).named_parameters()}
    assert groups == {"rgb", "depth", "fusion", "head"}
    with pytest.raises(ValueError):
        parameter_group("decoder.weight")
